// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ctcbir: dataset building, training, embedding, evaluation, explanation, and serving.

#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ctcbir/cli.hpp"
#include "ctcbir/service_http.hpp"

#include <CLI11.hpp>

namespace {

using namespace ctcbir;
namespace fs = std::filesystem;

/// Copies an option's value into an optional only when it was given.
template <typename T>
struct OptionalFlag {
  T value{};
  CLI::Option* opt = nullptr;
  std::optional<T> get() const { return opt && opt->count() > 0 ? std::optional<T>(value) : std::nullopt; }
};

int serve(const ServiceConfig& cfg) {
  // Block termination signals before any thread starts so sigwait receives them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Service service(cfg);
  HttpServer server(service);
  const int port = server.bind(cfg.host, cfg.port);
  std::thread worker([&] { server.run(); });
  server.wait_until_ready();
  std::cout << "serving on http://" << cfg.host << ":" << port << " (" << service.store()->size() << " slices)"
            << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  worker.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CT content-based image retrieval toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  // phantom
  cli::PhantomArgs phantom;
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  ph->add_option("--out-dir", phantom.out_dir, "Output directory")->required();
  ph->add_option("--n-volumes", phantom.n_volumes, "Number of volumes")->capture_default_str();
  ph->add_option("--seed", phantom.seed, "Generator seed")->capture_default_str();
  ph->add_option("--depth", phantom.options.depth, "Slices per volume")->capture_default_str();
  ph->add_option("--height", phantom.options.height, "Slice height")->capture_default_str();
  ph->add_option("--width", phantom.options.width, "Slice width")->capture_default_str();

  // build-dataset
  cli::BuildDatasetArgs build;
  auto* bd = app.add_subcommand("build-dataset", "Sample a balanced slice manifest from a volume directory");
  bd->add_option("--data-dir", build.data_dir, "Directory of volumes")->required();
  bd->add_option("--out", build.out_manifest, "Output manifest path")->required();
  bd->add_option("--n-train-volumes", build.n_train_volumes, "Volumes assigned to the train split")->required();
  bd->add_option("--seed", build.seed, "Sampling seed")->capture_default_str();
  bd->add_option("--n-liver", build.sampling.n_liver, "Liver slices per volume")->capture_default_str();
  bd->add_option("--n-nonliver", build.sampling.n_nonliver, "Liver-free slices per volume")->capture_default_str();
  bd->add_option("--min-liver-pixels", build.sampling.min_liver_pixels, "Mask pixels for a liver slice")
      ->capture_default_str();

  // train
  cli::TrainArgs train_args;
  std::string config_file, init_checkpoint;
  OptionalFlag<double> lr;
  OptionalFlag<int> epochs, batch_size, threads, checkpoint_every;
  OptionalFlag<std::uint64_t> train_seed;
  auto* tr = app.add_subcommand("train", "Self-supervised training");
  tr->add_option("--manifest", train_args.manifest, "Dataset manifest")->required();
  tr->add_option("--out-dir", train_args.out_dir, "Output directory")->required();
  auto* cfg_opt = tr->add_option("--config", config_file, "Run config JSON (train/augment/encoder/head)");
  tr->add_flag("--baseline-single-clip", train_args.baseline_single_clip, "Use the single-window baseline views");
  tr->add_flag("--no-pretrain", train_args.no_pretrain, "Random encoder initialization");
  auto* init_opt = tr->add_option("--init-checkpoint", init_checkpoint, "Pretrained encoder weights");
  lr.opt = tr->add_option("--lr", lr.value, "Learning rate (default 0.05*batch/256)");
  epochs.opt = tr->add_option("--epochs", epochs.value, "Epochs");
  batch_size.opt = tr->add_option("--batch-size", batch_size.value, "Batch size");
  train_seed.opt = tr->add_option("--seed", train_seed.value, "Training seed");
  threads.opt = tr->add_option("--threads", threads.value, "View-generation threads");
  checkpoint_every.opt = tr->add_option("--checkpoint-every", checkpoint_every.value, "Checkpoint period in epochs");

  // embed
  cli::EmbedArgs embed;
  std::string append_to;
  auto* em = app.add_subcommand("embed", "Embed manifest slices into a store");
  em->add_option("--checkpoint", embed.checkpoint, "Model checkpoint")->required();
  em->add_option("--manifest", embed.manifest, "Dataset manifest")->required();
  em->add_option("--out", embed.out_store, "Output store path")->required();
  em->add_option("--split", embed.split, "train, test, or all")->capture_default_str();
  auto* append_opt = em->add_option("--append-to", append_to, "Existing store to extend");

  // eval
  cli::EvalArgs eval;
  std::string report, csv, database = "test_loo";
  auto* ev = app.add_subcommand("eval", "MAP, kNN accuracy, and relevance rank");
  ev->add_option("--checkpoint", eval.checkpoint, "Checkpoint path; {seed} expands per --seeds entry")->required();
  ev->add_option("--manifest", eval.manifest, "Dataset manifest")->required();
  ev->add_option("--k", eval.options.k, "Retrieval depth")->capture_default_str();
  auto* report_opt = ev->add_option("--report", report, "Report JSON path");
  auto* csv_opt = ev->add_option("--csv", csv, "Per-query CSV path");
  ev->add_option("--seeds", eval.seeds, "Training seeds to aggregate")->delimiter(',');
  ev->add_option("--database", database, "MAP database: test_loo or train")->capture_default_str();
  ev->add_option("--rr-masks", eval.options.rr_masks, "Masks per slice for relevance rank; 0 skips")
      ->capture_default_str();
  ev->add_option("--mask-seed", eval.options.mask_seed, "Mask seed")->capture_default_str();
  ev->add_option("--threads", eval.options.threads, "Saliency threads")->capture_default_str();

  // explain
  cli::ExplainArgs explain;
  auto* ex = app.add_subcommand("explain", "Saliency overlay for one slice");
  ex->add_option("--checkpoint", explain.checkpoint, "Model checkpoint")->required();
  ex->add_option("--manifest", explain.manifest, "Dataset manifest")->required();
  ex->add_option("--slice-id", explain.slice_id, "Slice id")->required();
  ex->add_option("--n-masks", explain.n_masks, "Number of masks")->capture_default_str();
  ex->add_option("--seed", explain.seed, "Mask seed")->capture_default_str();
  ex->add_option("--out", explain.out_png, "Output PNG path")->required();
  ex->add_option("--threads", explain.threads, "Worker threads")->capture_default_str();

  // serve
  ServiceConfig service;
  std::string token;
  auto* sv = app.add_subcommand("serve", "HTTP retrieval and explanation service");
  sv->add_option("--checkpoint", service.checkpoint, "Model checkpoint")->required();
  sv->add_option("--store", service.store, "Embedding store")->required();
  sv->add_option("--data-root", service.data_root, "Volume directory")->required();
  sv->add_option("--host", service.host, "Bind address")->capture_default_str();
  sv->add_option("--port", service.port, "Port; 0 picks a free one")->capture_default_str();
  sv->add_option("--n-masks", service.n_masks, "Default masks per explanation")->capture_default_str();
  sv->add_option("--mask-seed", service.mask_seed, "Default mask seed")->capture_default_str();
  sv->add_option("--max-concurrent-explanations", service.max_concurrent_explanations,
                 "Explanations computed at once")
      ->capture_default_str();
  sv->add_option("--explain-threads", service.explain_threads, "Threads per explanation")->capture_default_str();
  auto* token_opt = sv->add_option("--auth-token", token, "Bearer token required on every route but /health")
                        ->envname("CTCBIR_AUTH_TOKEN");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*ph) {
      const auto paths = cli::cmd_phantom(phantom);
      std::cout << "wrote " << paths.size() << " volumes to " << phantom.out_dir.string() << "\n";
    } else if (*bd) {
      const auto m = cli::cmd_build_dataset(build);
      std::cout << "manifest: " << m.split(Split::kTrain).size() << " train / " << m.split(Split::kTest).size()
                << " test slices, " << m.skipped_volumes.size() << " volumes skipped\n";
    } else if (*tr) {
      if (cfg_opt->count()) train_args.config_file = config_file;
      if (init_opt->count()) train_args.init_checkpoint = init_checkpoint;
      train_args.lr = lr.get();
      train_args.epochs = epochs.get();
      train_args.batch_size = batch_size.get();
      train_args.seed = train_seed.get();
      train_args.threads = threads.get();
      train_args.checkpoint_every = checkpoint_every.get();
      const auto out = cli::cmd_train(train_args);
      if (!out.result.curve.empty())
        std::cout << "final loss " << out.result.curve.back().loss << ", checkpoint " << out.checkpoint.string()
                  << "\n";
    } else if (*em) {
      if (append_opt->count()) embed.append_to = append_to;
      const auto store = cli::cmd_embed(embed);
      std::cout << "store: " << store.size() << " entries, dim " << store.dim << "\n";
    } else if (*ev) {
      eval.options.database = parse_map_database(database);
      if (report_opt->count()) eval.report = report;
      if (csv_opt->count()) eval.csv = csv;
      const auto out = cli::cmd_eval(eval);
      nlohmann::json summary = {{"map", out["map"]},
                                {"knn_accuracy", out["knn_accuracy"]},
                                {"relevance_rank", out["relevance_rank"]}};
      for (const char* key : {"map_std", "knn_accuracy_std", "relevance_rank_std"})
        if (out.contains(key)) summary[key] = out[key];
      std::cout << summary.dump(2) << "\n";
    } else if (*ex) {
      const auto out = cli::cmd_explain(explain);
      std::cout << "wrote " << explain.out_png.string() << " and " << out.sidecar.string() << "\n";
    } else if (*sv) {
      if (token_opt->count()) service.auth_token = token;
      return serve(service);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_code_for(e);
  }
  return 0;
}
