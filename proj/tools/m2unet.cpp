#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "m2unet/cli.hpp"

namespace {

using namespace m2unet;

template <typename T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
  return o->count() ? std::optional<T>(v) : std::nullopt;
}

void add_threads(CLI::App* cmd, int& threads) {
  cmd->add_option("--threads", threads, "Operator worker threads (1 = deterministic path)")->default_val(1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"M2U-Net retinal vessel segmentation"};
  app.require_subcommand(1);
  int threads = 1;

  // segment
  cli::SegmentOptions seg;
  double seg_threshold = 0.5;
  std::string seg_optimal, seg_gt;
  auto* segment = app.add_subcommand("segment", "Probability map, binary map and overlay for one image");
  segment->add_option("--weights", seg.weights, "Weight file")->required();
  segment->add_option("--input", seg.input, "Input image (PNG or PPM)")->required();
  segment->add_option("--output", seg.output_dir, "Output directory")->required();
  auto* seg_thr_opt = segment->add_option("--threshold", seg_threshold, "Binarisation threshold");
  auto* seg_opt_opt = segment->add_option("--optimal-from", seg_optimal, "Directory with images/ and labels/");
  seg_thr_opt->excludes(seg_opt_opt);
  auto* seg_gt_opt = segment->add_option("--gt", seg_gt, "Ground-truth label for dice and overlay");
  segment->add_flag("--pad", seg.pad, "Zero-pad to a multiple of 16 and crop back");
  add_threads(segment, threads);

  // train
  cli::TrainOptions tr;
  std::string tr_config, tr_init;
  std::size_t tr_epochs = 0;
  std::uint64_t tr_seed = 0;
  auto* train = app.add_subcommand("train", "Train from scratch or from a pretrained encoder");
  train->add_option("--dataset", tr.dataset, "DRIVE, CHASE_DB1, HRF or synthetic")->required();
  train->add_option("--root", tr.root, "Dataset root (default $M2U_DATA_ROOT)");
  auto* tr_config_opt = train->add_option("--config", tr_config, "JSON training configuration");
  train->add_option("--out", tr.out_dir, "Output directory")->required();
  auto* tr_init_opt = train->add_option("--init", tr_init, "Weight file whose encoder initialises the model");
  train->add_option("--val-count", tr.val_count, "Training images held out for validation");
  auto* tr_epochs_opt = train->add_option("--epochs", tr_epochs, "Override the configured epoch count");
  auto* tr_seed_opt = train->add_option("--seed", tr_seed, "Override the configured seed");
  train->add_option("--synthetic-count", tr.synthetic_count, "Synthetic training images");
  train->add_option("--synthetic-size", tr.synthetic_size, "Synthetic image side length");
  add_threads(train, threads);

  // eval
  cli::EvalOptions ev;
  std::string ev_weights, ev_pred, ev_auc = "score-zero";
  auto* eval = app.add_subcommand("eval", "Per-image and aggregate metrics plus a PR curve");
  eval->add_option("--dataset", ev.dataset, "DRIVE, CHASE_DB1 or HRF")->required();
  eval->add_option("--root", ev.root, "Dataset root (default $M2U_DATA_ROOT)");
  eval->add_option("--split", ev.split, "test or train")->default_val("test");
  auto* ev_w_opt = eval->add_option("--weights", ev_weights, "Weight file to run");
  auto* ev_p_opt = eval->add_option("--predictions", ev_pred, "Directory of saved probability maps");
  ev_w_opt->excludes(ev_p_opt);
  eval->add_option("--out", ev.out_dir, "Output directory")->required();
  eval->add_option("--threshold", ev.threshold, "Binarisation threshold")->default_val(0.5);
  eval->add_option("--auc-crop", ev_auc, "Cropped pixels in AuC: score-zero or exclude")
      ->check(CLI::IsMember({"score-zero", "exclude"}));
  add_threads(eval, threads);

  // inspect
  cli::InspectOptions in;
  std::string in_res = "544x544", in_json;
  auto* inspect = app.add_subcommand("inspect", "Per-row parameter and multiply-add table");
  inspect->add_option("--resolution", in_res, "HxW")->default_val("544x544");
  inspect->add_option("--t-decoder", in.t_decoder, "Decoder expansion factor")->default_val(kDecoderContraction);
  auto* in_json_opt = inspect->add_option("--json", in_json, "Write the report as JSON");

  // bench
  cli::BenchOptions be;
  std::string be_res = "544x544", be_weights;
  auto* bench = app.add_subcommand("bench", "Forward-pass latency");
  auto* be_w_opt = bench->add_option("--weights", be_weights, "Weight file (random weights otherwise)");
  bench->add_option("--resolution", be_res, "HxW")->default_val("544x544");
  bench->add_option("--repeats", be.repeats, "Timed runs")->default_val(10);
  bench->add_option("--warmup", be.warmup, "Untimed runs first")->default_val(1);
  bench->add_option("--threads", be.threads, "Worker threads (0 = all cores)")->default_val(1);
  bench->add_option("--csv", be.csv, "Result CSV")->default_val("bench.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    set_num_threads(threads);
    if (*segment) {
      if (seg_thr_opt->count()) seg.threshold = seg_threshold;
      if (seg_opt_opt->count()) seg.optimal_from = seg_optimal;
      if (seg_gt_opt->count()) seg.gt = seg_gt;
      cli::run_segment(seg, std::cerr);
    } else if (*train) {
      if (tr_config_opt->count()) tr.config = tr_config;
      if (tr_init_opt->count()) tr.init_weights = tr_init;
      tr.epochs = opt_if(tr_epochs_opt, tr_epochs);
      tr.seed = opt_if(tr_seed_opt, tr_seed);
      cli::run_train(tr, std::cerr);
    } else if (*eval) {
      if (ev_w_opt->count()) ev.weights = ev_weights;
      if (ev_p_opt->count()) ev.predictions = ev_pred;
      ev.auc_mode = ev_auc == "exclude" ? AucCropMode::exclude : AucCropMode::score_zero;
      cli::run_eval(ev, std::cerr);
    } else if (*inspect) {
      std::tie(in.height, in.width) = cli::parse_resolution(in_res);
      if (in_json_opt->count()) in.json_out = in_json;
      const auto report = cli::run_inspect(in, std::cout);
      if (!report.audit_ok) return static_cast<int>(ErrorKind::numeric);
    } else if (*bench) {
      std::tie(be.height, be.width) = cli::parse_resolution(be_res);
      if (be_w_opt->count()) be.weights = be_weights;
      cli::run_bench(be, std::cerr);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return 0;
}
