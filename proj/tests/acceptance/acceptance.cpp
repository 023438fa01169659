// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <thread>
#include <unistd.h>

#include <CLI11.hpp>

#include "steerlab/cli/pipeline.hpp"
#include "steerlab/evalkit/token_shift.hpp"
#include "steerlab/lossbench/lossbench.hpp"
#include "steerlab/rng.hpp"
#include "steerlab/steering/steering.hpp"
#include "steerlab/tinylmm/io.hpp"
#include "steerlab/tinylmm/tokenizer.hpp"
#include "test_util.hpp"

namespace {

using namespace steerlab;
namespace fs = std::filesystem;
namespace tok = tinylmm::tokenizer;
using Clock = std::chrono::steady_clock;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void gradient_correctness() {
  const auto t0 = Clock::now();
  CounterRng rng(2024, Stream::kProbe);
  double worst = 0.0;
  int models = 0;
  for (; models < 20; ++models) {
    tinylmm::ModelConfig c;
    c.d_model = 8 * static_cast<int>(1 + rng.below(4));
    c.n_heads = std::vector<int>{1, 2, 4}[rng.below(3)];
    c.n_layers = static_cast<int>(1 + rng.below(3));
    c.vocab_size = static_cast<int>(16 + rng.below(32));
    c.n_image_tokens = static_cast<int>(1 + rng.below(3));
    c.d_ff = 2 * c.d_model;
    c.max_seq = c.n_image_tokens + 12;
    const auto p = testing::random_params<double>(c, 100 + static_cast<std::uint64_t>(models));
    const auto u = testing::random_image<double>(c.n_image_tokens, c.d_model, 200 + static_cast<std::uint64_t>(models));
    tinylmm::TokenSequence text(2 + rng.below(7));
    for (auto& t : text) t = static_cast<tinylmm::TokenId>(rng.below(static_cast<std::uint64_t>(c.vocab_size)));
    tinylmm::RowVector<double> w(c.vocab_size);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
    const tinylmm::LogitLoss<double> loss = [&w](const tinylmm::RowVector<double>& z, tinylmm::RowVector<double>& g) {
      g = w;
      return z.dot(w);
    };
    const auto ig = tinylmm::backward_wrt_image_tokens(p, text, u, loss);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      auto up = u, dn = u;
      up.data()[i] += h;
      dn.data()[i] -= h;
      const double fd = (tinylmm::forward(p, text, up).logits.dot(w) - tinylmm::forward(p, text, dn).logits.dot(w)) / (2 * h);
      const double an = ig.grad.data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
  }
  const double secs = seconds_since(t0);
  report("gradient_correctness", worst < 1e-4 && secs < 60.0,
         fmt("%d models, max rel err %.3g (< 1e-4), %.1f s (< 60 s)", models, worst, secs));
}

void projection_suite() {
  CounterRng rng(77, Stream::kProbe);
  double worst_idem = 0.0, worst_orth = 0.0, worst_norm = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = 2 + rng.below(63);
    const double scale = std::pow(10.0, -3.0 + 6.0 * rng.uniform());
    std::vector<double> r(d);
    steering::SteeringDirection a;
    a.values.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      r[i] = scale * rng.normal();
      a.values[i] = rng.normal();
    }
    const auto au = steering::normalize(a);
    const auto r1 = steering::ablate_residual(r, au);
    const auto r2 = steering::ablate_residual(r1, au);
    double nr = 0, nr1 = 0, dot = 0, diff = 0;
    for (std::size_t i = 0; i < d; ++i) {
      nr += r[i] * r[i];
      nr1 += r1[i] * r1[i];
      dot += r1[i] * au.values[i];
      diff = std::max(diff, std::abs(r2[i] - r1[i]));
    }
    nr = std::sqrt(nr);
    nr1 = std::sqrt(nr1);
    worst_idem = std::max(worst_idem, diff / nr);
    worst_orth = std::max(worst_orth, std::abs(dot) / std::max(nr1, 1e-300));
    worst_norm = std::max(worst_norm, (nr1 - nr) / nr);
  }
  report("projection_suite", worst_idem <= 1e-12 && worst_orth <= 1e-6 && worst_norm <= 1e-12,
         fmt("10000 pairs, idempotence %.2g (<= 1e-12 |r|), |<r',a>|/|r'| %.2g (<= 1e-6), norm growth %.2g (<= 1e-12)",
             worst_idem, worst_orth, worst_norm));
}

void loss_formulas(const fs::path& work) {
  const auto t0 = Clock::now();
  cli::LossbenchCommand b;
  b.out = work / "lossbench.csv";
  const auto bench = cli::cmd_lossbench(b);
  double worst = 0.0;
  for (const auto& c : bench.checks) worst = std::max(worst, c.max_rel_err);

  CounterRng rng(5, Stream::kProbe);
  double worst_sum = 0.0;
  bool support_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(255));
    std::vector<double> z(static_cast<std::size_t>(v));
    for (double& x : z) x = 3.0 * rng.normal();
    lossbench::TokenIds t;
    for (int j = 0; j < v; ++j) {
      if (t.empty() ? j == v - 1 || rng.uniform() < 0.2 : rng.uniform() < 0.2) t.push_back(j);
    }
    for (const auto& lg : {lossbench::kl_loss_and_grad(z, t), lossbench::column_ce_loss_and_grad(z, t)}) {
      double s = 0.0, mag = 0.0;
      for (double g : lg.grad) {
        s += g;
        mag += std::abs(g);
      }
      worst_sum = std::max(worst_sum, std::abs(s) / std::max(1.0, mag));
    }
    const auto mse = lossbench::mse_target_loss_and_grad(z, t, lossbench::default_mse_target(z));
    std::vector<int> support;
    for (int j = 0; j < v; ++j) {
      if (mse.grad[static_cast<std::size_t>(j)] != 0.0) support.push_back(j);
    }
    support_ok = support_ok && support == t;
  }

  const std::vector<double> tug{5.0, 0.0, 0.0, 0.0};
  const auto ce = lossbench::column_ce_loss_and_grad(tug, {0, 1});
  const bool witness = ce.grad[0] > 0.0;

  std::vector<double> mags{20.0, 30.0, 50.0};
  const auto sat = lossbench::sigmoid_saturation_probe(mags, {0}, 8);
  double sat_max = 0.0;
  for (const auto& row : sat) sat_max = std::max({sat_max, row.grad_factor, row.grad_inf_norm});
  sat_max = std::max(sat_max, lossbench::sigmoid_grad_factor(-20.0));

  const double secs = seconds_since(t0);
  const bool pass = bench.all_pass && worst < 1e-7 && worst_sum <= 1e-12 && support_ok && witness &&
                    sat_max < 1e-6 && secs < 10.0;
  report("loss_gradient_formulas", pass,
         fmt("%zu checks max rel err %.2g (< 1e-7); KL/CE grad sums %.2g; MSE support %s; CE grad at target %.3f "
             "(> 0); sigmoid factor at |z|>=20 %.2g (< 1e-6); %.2f s (< 10 s)",
             bench.checks.size(), worst, worst_sum, support_ok ? "= T" : "!= T", ce.grad[0], sat_max, secs));
}

void bias_loss_contract() {
  CounterRng rng(9, Stream::kProbe);
  double worst_loss = 0.0, worst_grad = 0.0, worst_fd = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int v = 2 + static_cast<int>(rng.below(100));
    tinylmm::RowVector<double> z(v);
    for (Eigen::Index i = 0; i < v; ++i) z(i) = 2.0 * rng.normal();
    steering::TargetTokenSet t{"age", {}};
    for (int j = 0; j < v; ++j) {
      if (rng.uniform() < 0.15) t.tokens.push_back(j);
    }
    if (t.tokens.empty()) t.tokens.push_back(static_cast<tinylmm::TokenId>(rng.below(static_cast<std::uint64_t>(v))));
    tinylmm::RowVector<double> g;
    const double loss = steering::bias_loss(z, t, g);
    const double mx = z.maxCoeff();
    worst_loss = std::max(worst_loss, std::abs(loss - mx * mx) / (mx * mx));
    tinylmm::RowVector<double> expect = tinylmm::RowVector<double>::Zero(v);
    for (auto k : t.tokens) expect(k) = -2.0 / static_cast<double>(t.tokens.size()) * mx;
    worst_grad = std::max(worst_grad, (g - expect).cwiseAbs().maxCoeff() / std::abs(mx));
    // numeric derivative with M_t frozen at the base point
    tinylmm::RowVector<double> m = tinylmm::RowVector<double>::Zero(v);
    for (auto k : t.tokens) m(k) = z(k) + mx;
    auto frozen = [&](const tinylmm::RowVector<double>& x) {
      double s = 0.0;
      for (auto k : t.tokens) s += (x(k) - m(k)) * (x(k) - m(k));
      return s / static_cast<double>(t.tokens.size());
    };
    const double h = 1e-5;
    for (Eigen::Index j = 0; j < v; ++j) {
      auto up = z, dn = z;
      up(j) += h;
      dn(j) -= h;
      const double fd = (frozen(up) - frozen(dn)) / (2 * h);
      worst_fd = std::max(worst_fd, std::abs(fd - g(j)) / std::max(1.0, std::abs(fd)));
    }
  }
  report("bias_loss_contract", worst_loss <= 1e-12 && worst_grad <= 1e-12 && worst_fd <= 1e-7,
         fmt("200 logit vectors: loss vs max(z)^2 %.2g, grad vs -(2/|T|)max(z) %.2g, numeric %.2g (<= 1e-7)",
             worst_loss, worst_grad, worst_fd));
}

void fgsm_contract(const tinylmm::ModelParams& model, const cli::CorpusDir& corpus) {
  const auto targets = cli::target_tokens(corpus.lexicon("age"));
  const auto prompt = tok::prompt_tokens(corpus.prompts[evalkit::kAttributePromptId]);
  std::vector<std::string> ids;
  for (const auto& [id, img] : corpus.images) ids.push_back(id);
  // partial Fisher-Yates draw of 100 images
  CounterRng rng(31, Stream::kProbe);
  const std::size_t n = std::min<std::size_t>(100, ids.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
  auto mean_target = [&](const tinylmm::ImageTokens<float>& u) {
    const auto z = tinylmm::forward(model, prompt, u).logits;
    double s = 0.0;
    for (auto t : targets.tokens) s += z(t);
    return s / static_cast<double>(targets.tokens.size());
  };
  std::size_t increased = 0;
  double worst_excess = -1e300;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& u = corpus.images.at(ids[i]);
    const auto ig = tinylmm::backward_wrt_image_tokens<float>(model, prompt, u, steering::bias_loss_fn<float>(targets));
    const double eps = steering::epsilon_from_tokens(u);
    const tinylmm::ImageTokens<double> ud = u.cast<double>();
    const auto up = steering::fgsm_perturb<double>(ud, ig.grad.cast<double>(), eps);
    worst_excess = std::max(worst_excess, (up - ud).cwiseAbs().maxCoeff() - eps);
    if (mean_target(up.cast<float>()) > mean_target(u)) ++increased;
  }
  const double frac = static_cast<double>(increased) / static_cast<double>(n);
  report("fgsm_contract", frac >= 0.95 && worst_excess <= 0.0,
         fmt("target logit increased on %zu/%zu images (>= 95%%, mode %s); max |u'-u|_inf - eps = %.2g (<= 0)",
             increased, n, steering::to_string(steering::kDefaultPerturbMode).c_str(), worst_excess));
}

const evalkit::ReportRow* find_row(const evalkit::EvalReport& r, const std::string& method) {
  for (const auto& row : r.rows) {
    if (row.attribute == "age" && row.method == method) return &row;
  }
  return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerlab acceptance run"};
  std::string work_arg;
  std::string recount = STEERLAB_RECOUNT_SCRIPT;
  int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool keep = false;
  app.add_option("--work-dir", work_arg, "keep all artifacts in this directory");
  app.add_option("--recount", recount, "independent recount script")->capture_default_str();
  app.add_option("--workers", workers, "generation threads")->capture_default_str();
  app.add_flag("--keep", keep, "do not delete the temporary work directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = work_arg.empty()
                            ? fs::temp_directory_path() / ("steerlab_acceptance_" + std::to_string(::getpid()))
                            : fs::path(work_arg);
  fs::create_directories(work);
  const bool remove_work = work_arg.empty() && !keep;

  try {
    gradient_correctness();
    projection_suite();
    loss_formulas(work);
    bias_loss_contract();

    // desk-scale pipeline
    const auto t0 = Clock::now();
    cli::GenDataCommand gen;
    gen.out_dir = work / "corpus";
    cli::cmd_gen_data(gen);

    cli::TrainCommand train;
    train.corpus_dir = gen.out_dir;
    train.out = work / "model.bin";
    const auto trained = cli::cmd_train(train);
    std::cout << "trained " << train.steps << " steps, final loss " << trained.loss_curve.back() << " ("
              << seconds_since(t0) << " s)" << std::endl;

    const fs::path dirs[] = {work / "dir_dataset.json", work / "dir_gradient.json"};
    for (auto method : {steering::Method::kDataset, steering::Method::kGradient}) {
      cli::DirectionCommand d;
      d.method = method;
      d.model = train.out;
      d.corpus_dir = gen.out_dir;
      d.out = dirs[method == steering::Method::kDataset ? 0 : 1];
      const auto r = cli::cmd_direction(d);
      std::cout << "direction " << steering::to_string(method) << ": candidate " << r.selected << " layer "
                << r.direction.source_layer << " " << r.direction.position.to_string() << std::endl;
    }

    const std::string names[] = {"unsteered", "dataset", "gradient"};
    std::vector<fs::path> gens;
    for (int i = 0; i < 3; ++i) {
      cli::GenerateCommand g;
      g.model = train.out;
      g.corpus_dir = gen.out_dir;
      if (i > 0) g.direction = dirs[i - 1];
      g.workers = workers;
      g.out = work / ("gen_" + names[i] + ".jsonl");
      cli::cmd_generate(g);
      gens.push_back(g.out);
    }

    cli::EvaluateCommand e;
    e.generations = gens;
    e.corpus_dir = gen.out_dir;
    e.out_dir = work / "report";
    const auto report_rows = cli::cmd_evaluate(e);
    const double pipeline_secs = seconds_since(t0);

    const auto model = tinylmm::load_params(train.out);
    const auto corpus = cli::load_corpus_dir(gen.out_dir);
    const auto* base = find_row(report_rows, "unsteered");
    const auto* ds = find_row(report_rows, "dataset");
    const auto* gr = find_row(report_rows, "gradient");
    if (!base || !ds || !gr) throw std::runtime_error("report is missing a method row");

    fgsm_contract(model, corpus);

    report("e2e_unsteered_mentions", base->mention_fraction >= 0.30,
           fmt("attribute words in %.1f%% of unsteered generations (>= 30%%)", 100.0 * base->mention_fraction));
    report("e2e_a_dataset_mentions", ds->mentions_per_1k <= 0.5 * base->mentions_per_1k,
           fmt("dataset %.1f vs unsteered %.1f per 1k (<= 50%%: %.1f%%)", ds->mentions_per_1k,
               base->mentions_per_1k, 100.0 * ds->mentions_per_1k / base->mentions_per_1k));
    report("e2e_b_gradient_mentions", gr->mentions_per_1k <= base->mentions_per_1k,
           fmt("gradient %.1f vs unsteered %.1f per 1k", gr->mentions_per_1k, base->mentions_per_1k));
    report("e2e_c_occupation", std::abs(ds->occupation_change) <= 0.30 && std::abs(gr->occupation_change) <= 0.30,
           fmt("occupation rate unsteered %.3f, dataset %.3f (%+.1f%%), gradient %.3f (%+.1f%%) (within 30%%)",
               base->occupation_rate, ds->occupation_rate, 100.0 * ds->occupation_change, gr->occupation_rate,
               100.0 * gr->occupation_change));

    const auto held_out = cli::attribute_free_examples(corpus, "eval");
    const double ppl0 = cli::steered_perplexity(model, held_out, nullptr);
    const auto s_ds = cli::load_steering(dirs[0], tinylmm::checksum(model), corpus.prompts);
    const auto s_gr = cli::load_steering(dirs[1], tinylmm::checksum(model), corpus.prompts);
    const double ppl_ds = cli::steered_perplexity(model, held_out, &s_ds);
    const double ppl_gr = cli::steered_perplexity(model, held_out, &s_gr);
    report("e2e_d_perplexity", ppl_ds <= 1.2 * ppl0 && ppl_gr <= 1.2 * ppl0,
           fmt("attribute-free held-out perplexity %.4f, dataset %.4f (%+.1f%%), gradient %.4f (%+.1f%%) (<= +20%%)",
               ppl0, ppl_ds, 100.0 * (ppl_ds / ppl0 - 1), ppl_gr, 100.0 * (ppl_gr / ppl0 - 1)));
    report("e2e_runtime", pipeline_secs < 900.0, fmt("gen-data to evaluate %.0f s (< 900 s)", pipeline_secs));

    const bool sent_ok = ds->negative_variance <= base->negative_variance &&
                         ds->negative_range <= base->negative_range &&
                         gr->negative_variance <= base->negative_variance &&
                         gr->negative_range <= base->negative_range;
    report("sentiment_disparity", sent_ok,
           fmt("negative-rate variance/range unsteered %.1f/%.1f, dataset %.1f/%.1f, gradient %.1f/%.1f",
               base->negative_variance, base->negative_range, ds->negative_variance, ds->negative_range,
               gr->negative_variance, gr->negative_range));

    std::ostringstream cmd;
    cmd << "python3 '" << recount << "' '" << gen.out_dir.string() << "' '" << (e.out_dir / "report.json").string()
        << "'";
    for (const auto& g : gens) cmd << " '" << g.string() << "'";
    const int rc = std::system(cmd.str().c_str());
    report("evaluation_determinism", rc == 0, rc == 0 ? "recount script agrees exactly" : "recount script disagrees");

    std::vector<evalkit::ShiftInput> inputs;
    for (const auto& r : evalkit::read_generations(gens[1])) {
      if (inputs.size() == 60) break;
      inputs.push_back({tok::prompt_tokens(corpus.prompts[static_cast<std::size_t>(r.prompt_id)]),
                        tok::encode(r.text), corpus.images.at(r.image_id)});
    }
    const auto table = evalkit::token_probability_shift(model, inputs, s_ds.direction.to_ablation(), 20);
    bool sorted = true;
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
      sorted = sorted && std::abs(table.rows[i - 1].mean_delta) >= std::abs(table.rows[i].mean_delta);
    }
    report("token_probability_shift", table.max_abs_position_sum <= 1e-6 && sorted,
           fmt("%zu positions, max |sum delta| %.2g (<= 1e-6), table %s", table.positions,
               table.max_abs_position_sum, sorted ? "sorted by |delta|" : "NOT sorted"));
  } catch (const std::exception& ex) {
    report("acceptance_run", false, std::string("aborted: ") + ex.what());
  }

  if (remove_work) fs::remove_all(work);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
