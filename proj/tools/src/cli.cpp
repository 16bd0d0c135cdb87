#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "barcodemae/error.hpp"
#include "barcodemae/evalsuite.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/model.hpp"
#include "barcodemae/seqdata.hpp"
#include "barcodemae/train.hpp"

namespace barcodemae::cli {
namespace {

namespace fs = std::filesystem;

struct Common {
  std::uint64_t seed = 0;
  std::string run_dir = "run";
  std::string name = "default";

  fs::path run_path() const { return fs::path(run_dir) / name; }
};

std::vector<Partition> parse_partitions(const std::string& text) {
  std::vector<Partition> out;
  for (auto part : split(text, ',')) {
    if (!part.empty()) out.push_back(parse_partition(part));
  }
  if (out.empty()) throw ConfigError("empty partition list");
  return out;
}

RecordSet load_view(const std::string& path, const std::string& partitions) {
  const RecordSet all = load_records(path);
  if (partitions == "all") return all;
  return partition_view(all, parse_partitions(partitions));
}

/// Model and training flags shared by `pretrain` and `ablate`.
struct ModelFlags {
  std::string variant = "barcode-mae";
  std::string arch;
  std::string positional = "learned";
  ModelConfig base;
  CLI::Option* enc_layers = nullptr;
  CLI::Option* enc_heads = nullptr;
  CLI::Option* dec_layers = nullptr;
  CLI::Option* dec_heads = nullptr;
  int enc_layers_v = 0, enc_heads_v = 0, dec_layers_v = 0, dec_heads_v = 0;

  void bind(CLI::App* app, bool with_k) {
    app->add_option("--variant", variant, "barcode-mae | mae-with-mask | encoder-only")->capture_default_str();
    app->add_option("--arch", arch, "Layer/head string \"enc:L-H dec:M-J\"");
    enc_layers = app->add_option("--enc-layers", enc_layers_v, "Encoder layers");
    enc_heads = app->add_option("--enc-heads", enc_heads_v, "Encoder heads");
    dec_layers = app->add_option("--dec-layers", dec_layers_v, "Decoder layers");
    dec_heads = app->add_option("--dec-heads", dec_heads_v, "Decoder heads");
    app->add_option("--d-model", base.d_model, "Hidden width")->capture_default_str();
    app->add_option("--d-ff", base.d_ff, "Feed-forward width")->capture_default_str();
    if (with_k) app->add_option("--k", base.k, "k-mer length")->capture_default_str();
    app->add_option("--max-tokens", base.max_tokens, "Maximum tokens per sequence")->capture_default_str();
    app->add_option("--dropout", base.dropout, "Dropout probability")->capture_default_str();
    app->add_option("--positional", positional, "learned | sinusoidal")->capture_default_str();
    app->add_flag("--tie-embeddings", base.tie_output_embeddings, "Tie the output head to the token embedding");
    app->add_flag("--with-mask-bert", base.with_mask_bert, "80/10/10 corruption for mae-with-mask");
  }

  ModelConfig resolve(const std::string& arch_override = "") const {
    ModelConfig cfg = base;
    cfg.variant = parse_variant(variant);
    cfg.positional = parse_positional(positional);
    const std::string& a = arch_override.empty() ? arch : arch_override;
    if (!a.empty()) {
      apply_arch_string(a, cfg);
    } else if (cfg.variant == Variant::encoder_only) {
      cfg.dec_layers = 0;
    }
    if (enc_layers->count() > 0) cfg.enc_layers = enc_layers_v;
    if (enc_heads->count() > 0) cfg.enc_heads = enc_heads_v;
    if (dec_layers->count() > 0) cfg.dec_layers = dec_layers_v;
    if (dec_heads->count() > 0) cfg.dec_heads = dec_heads_v;
    cfg.validate();
    return cfg;
  }
};

struct TrainFlags {
  std::string preset = "method";
  TrainConfig values;
  std::vector<std::pair<CLI::Option*, std::function<void(TrainConfig&)>>> overrides;

  template <typename T>
  void add(CLI::App* app, const std::string& flag, T TrainConfig::*field, const std::string& help) {
    CLI::Option* o = app->add_option(flag, values.*field, help);
    overrides.emplace_back(o, [this, field](TrainConfig& t) { t.*field = values.*field; });
  }

  void bind(CLI::App* app) {
    app->add_option("--preset", preset, "method | appendix")->capture_default_str();
    add(app, "--epochs", &TrainConfig::epochs, "Training epochs");
    add(app, "--batch-size", &TrainConfig::batch_size, "Sequences per optimizer step");
    add(app, "--lr", &TrainConfig::max_lr, "Peak learning rate");
    add(app, "--weight-decay", &TrainConfig::weight_decay, "Decoupled weight decay");
    add(app, "--mask-ratio", &TrainConfig::mask_ratio, "Share of tokens masked");
    add(app, "--warmup", &TrainConfig::warmup_fraction, "Share of steps spent warming up");
    add(app, "--grad-clip", &TrainConfig::grad_clip, "Global gradient norm limit");
  }

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig t = TrainConfig::preset(preset);
    for (const auto& [opt, apply] : overrides) {
      if (opt->count() > 0) apply(t);
    }
    t.seed = seed;
    t.validate();
    return t;
  }
};

struct ProbeFlags {
  std::string reference = "seen_train";
  std::string query = "unseen_test";
  std::string level = "genus";

  void bind(CLI::App* app) {
    app->add_option("--reference", reference, "Reference partitions (comma list)")->capture_default_str();
    app->add_option("--query", query, "Query partitions (comma list)")->capture_default_str();
    app->add_option("--level", level, "genus | species | bin")->capture_default_str();
  }
};

const std::string kZscDefault = "unseen_keys,unseen_val,unseen_test";

std::string format_zsc_summary(const ClusterResult& r) {
  return "metric\tvalue\nami\t" + format_double(r.ami) + "\nn_clusters\t" + std::to_string(r.n_clusters) +
         "\nn_records\t" + std::to_string(r.record_ids.size()) + "\n";
}

/// Value of `key` in the first column of a two-column TSV, or the accuracy
/// column of the ALL row in a probe table.
double read_tsv_value(const fs::path& path, const std::string& key, std::size_t column) {
  const std::string text = read_file(path);
  for (auto line : split(text, '\n')) {
    const auto fields = split(line, '\t');
    if (fields.size() > column && fields[0] == key) return parse_double(fields[column]);
  }
  throw DataError(path.string() + ": no '" + key + "' row");
}

std::string arch_slug(const std::string& arch, int k) {
  std::string s;
  for (char c : arch) {
    if (c == ' ') {
      s += '_';
    } else if (c != ':') {
      s += c;
    }
  }
  return s + "_k" + std::to_string(k);
}

std::vector<std::string> split_grid(const std::string& grid) {
  std::vector<std::string> out;
  for (auto part : split(grid, ';')) {
    const auto b = part.find_first_not_of(' ');
    if (b == std::string_view::npos) continue;
    const auto e = part.find_last_not_of(' ');
    out.emplace_back(part.substr(b, e - b + 1));
  }
  if (out.empty()) throw ConfigError("empty architecture grid");
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-autoencoder pretraining and evaluation for DNA barcodes", "barcodemae"};
  app.set_config("--config", "", "Read options from a 'key = value' file");
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "Random seed")->envname("BARCODEMAE_SEED")->capture_default_str();
  app.add_option("--run-dir", common.run_dir, "Root of the run directory tree")->capture_default_str();
  app.add_option("--name", common.name, "Run name under the run directory")->capture_default_str();

  // generate
  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic barcode corpus");
  SyntheticCorpusConfig corpus;
  std::string generate_out;
  generate->add_option("--genera", corpus.n_genera, "Number of genera")->capture_default_str();
  generate->add_option("--species", corpus.species_per_genus, "Species per genus")->capture_default_str();
  generate->add_option("--records", corpus.records_per_species, "Records per species")->capture_default_str();
  generate->add_option("--seq-len", corpus.seq_len, "Sequence length")->capture_default_str();
  generate->add_option("--genus-divergence", corpus.genus_divergence, "Per-site genus divergence")->capture_default_str();
  generate->add_option("--species-divergence", corpus.species_divergence, "Per-site species divergence")->capture_default_str();
  generate->add_option("--noise", corpus.noise_rate, "Per-site record noise")->capture_default_str();
  generate->add_option("--unseen-fraction", corpus.unseen_species_fraction, "Share of species held out")->capture_default_str();
  generate->add_option("--pretrain-fraction", corpus.pretrain_fraction, "Share of records for pretraining")->capture_default_str();
  generate->add_option("-o,--output", generate_out, "Output TSV")->required();

  // pretrain
  CLI::App* pretrain = app.add_subcommand("pretrain", "Masked-token pretraining");
  ModelFlags model_flags;
  TrainFlags train_flags;
  std::string pretrain_data, pretrain_partitions = "pretrain", resume_path;
  pretrain->add_option("--data", pretrain_data, "Record file (TSV or FASTA)")->required();
  pretrain->add_option("--partitions", pretrain_partitions, "Partitions to train on, or 'all'")->capture_default_str();
  pretrain->add_option("--resume", resume_path, "Continue from this checkpoint");
  model_flags.bind(pretrain, true);
  train_flags.bind(pretrain);

  // embed
  CLI::App* embed = app.add_subcommand("embed", "Pooled encoder embeddings");
  std::string embed_ckpt, embed_data, embed_partitions = "all", embed_out;
  embed->add_option("--checkpoint", embed_ckpt, "Checkpoint file")->required();
  embed->add_option("--data", embed_data, "Record file")->required();
  embed->add_option("--partitions", embed_partitions, "Partitions to embed, or 'all'")->capture_default_str();
  embed->add_option("-o,--output", embed_out, "Output TSV (default run/<name>/embeddings/embeddings.tsv)");

  // eval
  CLI::App* eval = app.add_subcommand("eval", "Evaluation protocols");
  eval->require_subcommand(1);
  std::string eval_ckpt, eval_data;
  auto add_eval_inputs = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    sub->add_option("--data", eval_data, "Record file")->required();
  };

  CLI::App* knn = eval->add_subcommand("knn", "1-NN probe");
  ProbeFlags knn_flags;
  add_eval_inputs(knn);
  knn_flags.bind(knn);

  CLI::App* zsc = eval->add_subcommand("zsc", "Zero-shot BIN reconstruction");
  std::string zsc_partitions = kZscDefault;
  int zsc_dims = 50;
  add_eval_inputs(zsc);
  zsc->add_option("--partitions", zsc_partitions, "Partitions to cluster")->capture_default_str();
  zsc->add_option("--dims", zsc_dims, "Reduced dimensionality")->capture_default_str();

  CLI::App* robustness = eval->add_subcommand("robustness", "Token-drop robustness curves");
  ProbeFlags rob_flags;
  std::string modes = "mask,delete", ratios = "0:0.9:0.1";
  add_eval_inputs(robustness);
  rob_flags.bind(robustness);
  robustness->add_option("--modes", modes, "Comma list of mask,delete")->capture_default_str();
  robustness->add_option("--ratios", ratios, "start:stop:step or comma list")->capture_default_str();

  CLI::App* report = eval->add_subcommand("report", "Harmonic mean of 1-NN accuracy and AMI");
  std::string report_knn, report_zsc;
  report->add_option("--knn", report_knn, "1-NN table (default run/<name>/results/knn.tsv)");
  report->add_option("--zsc", report_zsc, "ZSC summary (default run/<name>/results/zsc.tsv)");

  // ablate
  CLI::App* ablate = app.add_subcommand("ablate", "Architecture x k grid");
  ModelFlags ablate_model;
  TrainFlags ablate_train;
  ProbeFlags ablate_probe;
  std::string ablate_data, ablate_grid = "enc:2-2 dec:2-2", ablate_partitions = "pretrain";
  std::vector<int> ablate_ks = {4};
  ablate->add_option("--data", ablate_data, "Record file")->required();
  ablate->add_option("--grid", ablate_grid, "Architectures separated by ';'")->capture_default_str();
  ablate->add_option("--k", ablate_ks, "k values (comma list)")->delimiter(',');
  ablate->add_option("--partitions", ablate_partitions, "Pretraining partitions")->capture_default_str();
  ablate_model.bind(ablate, false);
  ablate_train.bind(ablate);
  ablate_probe.bind(ablate);

  std::vector<const char*> argv;
  argv.push_back("barcodemae");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (generate->parsed()) {
      const RecordSet set = generate_synthetic(corpus, common.seed);
      save_records(set, generate_out);
      out << "wrote " << set.size() << " records to " << generate_out << '\n';
    } else if (pretrain->parsed()) {
      const RecordSet records = load_view(pretrain_data, pretrain_partitions);
      TrainOptions options;
      options.checkpoint_dir = common.run_path() / "checkpoints";
      options.metrics_path = common.run_path() / "metrics" / "train.tsv";
      ModelConfig model;
      TrainConfig train_cfg;
      if (!resume_path.empty()) {
        options.resume = load_checkpoint(resume_path);
        model = options.resume->model;
        train_cfg = options.resume->train;
      } else {
        model = model_flags.resolve();
        train_cfg = train_flags.resolve(common.seed);
      }
      options.on_epoch = [&](const EpochMetrics& m) {
        out << "epoch " << m.epoch << " loss " << format_double(m.loss) << " masked_acc "
            << format_double(m.masked_acc) << '\n';
      };
      train(records, model, train_cfg, options);
      out << "checkpoint " << (options.checkpoint_dir / "last.ckpt").string() << '\n';
    } else if (embed->parsed()) {
      const Checkpoint ckpt = load_checkpoint(embed_ckpt);
      const EmbeddingMatrix e = embed_corpus(ckpt.params, load_view(embed_data, embed_partitions));
      const fs::path path = embed_out.empty() ? common.run_path() / "embeddings" / "embeddings.tsv" : fs::path(embed_out);
      write_file_atomic(path, format_embedding_tsv(e));
      out << "wrote " << e.rows() << " embeddings to " << path.string() << '\n';
    } else if (knn->parsed()) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const RecordSet all = load_records(eval_data);
      const LabelLevel level = parse_label_level(knn_flags.level);
      const ProbeResult r =
          knn_probe(labelled_rows(embed_corpus(ckpt.params, partition_view(all, parse_partitions(knn_flags.reference))), level),
                    labelled_rows(embed_corpus(ckpt.params, partition_view(all, parse_partitions(knn_flags.query))), level),
                    level);
      write_file_atomic(common.run_path() / "results" / "knn.tsv", format_probe_tsv(r, level));
      out << "accuracy\t" << format_double(r.accuracy) << '\n';
    } else if (zsc->parsed()) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      ZscOptions options;
      options.target_dim = zsc_dims;
      const ClusterResult r = bin_reconstruction_eval(ckpt.params, load_view(eval_data, zsc_partitions), options);
      write_file_atomic(common.run_path() / "results" / "zsc_assignments.tsv", format_cluster_tsv(r));
      write_file_atomic(common.run_path() / "results" / "zsc.tsv", format_zsc_summary(r));
      out << "ami\t" << format_double(r.ami) << '\n';
    } else if (robustness->parsed()) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const RecordSet all = load_records(eval_data);
      const RecordSet ref = partition_view(all, parse_partitions(rob_flags.reference));
      const RecordSet query = partition_view(all, parse_partitions(rob_flags.query));
      const std::vector<double> grid = parse_ratios(ratios);
      const LabelLevel level = parse_label_level(rob_flags.level);
      std::vector<RobustnessCurve> curves;
      for (auto m : split(modes, ',')) {
        curves.push_back(robustness_sweep(ckpt.params, ref, query, grid, parse_corruption_mode(m), common.seed, level));
        for (const auto& w : curves.back().warnings) err << "warning: " << w << '\n';
      }
      const std::string table = format_curve_tsv(curves);
      write_file_atomic(common.run_path() / "results" / "robustness.tsv", table);
      out << table;
    } else if (report->parsed()) {
      const fs::path knn_path = report_knn.empty() ? common.run_path() / "results" / "knn.tsv" : fs::path(report_knn);
      const fs::path zsc_path = report_zsc.empty() ? common.run_path() / "results" / "zsc.tsv" : fs::path(report_zsc);
      const double acc = read_tsv_value(knn_path, "ALL", 3);
      const double ami_value = read_tsv_value(zsc_path, "ami", 1);
      const double hm = harmonic_mean(acc, std::max(0.0, ami_value));
      write_file_atomic(common.run_path() / "results" / "report.tsv",
                        "knn_accuracy\tzsc_ami\tharmonic_mean\n" + format_double(acc) + '\t' +
                            format_double(ami_value) + '\t' + format_double(hm) + '\n');
      out << "harmonic_mean\t" << format_double(hm) << '\n';
    } else if (ablate->parsed()) {
      const RecordSet all = load_records(ablate_data);
      const RecordSet pretrain_set = ablate_partitions == "all" ? all : partition_view(all, parse_partitions(ablate_partitions));
      const LabelLevel level = parse_label_level(ablate_probe.level);
      const RecordSet ref = partition_view(all, parse_partitions(ablate_probe.reference));
      const RecordSet query = partition_view(all, parse_partitions(ablate_probe.query));
      const RecordSet zsc_set = partition_view(all, parse_partitions(kZscDefault));
      const TrainConfig train_cfg = ablate_train.resolve(common.seed);
      // Validate every grid entry before training anything.
      std::vector<ModelConfig> configs;
      const auto archs = split_grid(ablate_grid);
      for (const auto& arch : archs) {
        for (int k : ablate_ks) {
          ModelConfig cfg = ablate_model.resolve(arch);
          cfg.k = k;
          cfg.validate();
          configs.push_back(cfg);
        }
      }
      std::string table = "arch\tk\tfinal_loss\tknn_accuracy\tzsc_ami\tharmonic_mean\n";
      for (const ModelConfig& cfg : configs) {
        const std::string arch = cfg.arch_string();
        const fs::path run = common.run_path() / "ablate" / arch_slug(arch, cfg.k);
        TrainOptions options;
        options.checkpoint_dir = run / "checkpoints";
        options.metrics_path = run / "metrics" / "train.tsv";
        const TrainResult result = train(pretrain_set, cfg, train_cfg, options);
        const auto& params = result.checkpoint.params;
        const ProbeResult probe = knn_probe(labelled_rows(embed_corpus(params, ref), level),
                                            labelled_rows(embed_corpus(params, query), level), level);
        const ClusterResult cluster = bin_reconstruction_eval(params, zsc_set);
        const double final_loss = result.metrics.empty() ? 0.0 : result.metrics.back().loss;
        table += arch + '\t' + std::to_string(cfg.k) + '\t' + format_double(final_loss) + '\t' +
                 format_double(probe.accuracy) + '\t' + format_double(cluster.ami) + '\t' +
                 format_double(harmonic_mean(probe.accuracy, std::max(0.0, cluster.ami))) + '\n';
        out << arch << " k=" << cfg.k << " knn " << format_double(probe.accuracy) << " ami "
            << format_double(cluster.ami) << '\n';
      }
      write_file_atomic(common.run_path() / "results" / "ablation.tsv", table);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kCheckpointError;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace barcodemae::cli
