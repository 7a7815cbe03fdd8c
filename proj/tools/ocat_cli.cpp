#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "ocat/harness.hpp"

namespace fs = std::filesystem;
using namespace ocat;

namespace {

struct Global {
  std::string workdir = "ocat_work";
  std::string config;
  bool check = false;
  bool verbose = false;
  bool deterministic = false;
};

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ExperimentConfig::desk_default();
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  return ExperimentConfig::from_json(nlohmann::json::parse(in));
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream file;
  if (path != "-") {
    file.open(path);
    if (!file) throw Error("cannot open " + path);
  }
  std::istream& in = path == "-" ? std::cin : file;
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream file;
  if (path != "-") {
    file.open(path);
    if (!file) throw Error("cannot write " + path);
  }
  std::ostream& out = path == "-" ? std::cout : file;
  for (const auto& l : lines) out << l << '\n';
}

// "tag \t source \t target"; tag "-" marks an untagged example.
struct TaggedRecord {
  std::string tag;
  CorpusRecord record;
};

std::vector<TaggedRecord> read_tagged(const std::string& path) {
  std::vector<TaggedRecord> out;
  for (const auto& line : read_lines(path)) {
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw Error("mixture line needs tag, source and target: " + line);
    CorpusRecord r;
    r.corpus_id = "mixture";
    r.source = line.substr(a + 1, b - a - 1);
    r.target = line.substr(b + 1);
    out.push_back({line.substr(0, a), std::move(r)});
  }
  return out;
}

struct ModelDir {
  Checkpoint<float> ckpt;
  Tokenizer tok;
};

ModelDir load_model_dir(const fs::path& dir, const std::string& model_file = "model.bin") {
  return {load_checkpoint<float>(dir / model_file), Tokenizer::load(dir / "vocab.txt", dir / "vocab.json")};
}

void save_model_dir(const fs::path& dir, const Checkpoint<float>& ck, const Tokenizer& tok) {
  fs::create_directories(dir);
  save_checkpoint(dir / "model.bin", ck);
  tok.save(dir / "vocab.txt", dir / "vocab.json");
}

int emit(const std::vector<Report>& reports, const std::vector<CheckResult>& checks, Lab& lab, bool check) {
  for (const auto& r : reports) {
    write_report(r, lab.workdir() / "reports");
    r.write_tsv(std::cout);
    std::cout << '\n';
  }
  if (!check) return 0;
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << c.detail << '\n';
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Corpus-aware training laboratory"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--workdir", g.workdir, "Directory for corpora, models and reports")->capture_default_str();
  app.add_option("--config", g.config, "Experiment config JSON (default: desk preset)");
  app.add_flag("--check", g.check, "Evaluate acceptance checks; exit nonzero on failure");
  app.add_flag("-v,--verbose", g.verbose, "Log progress to stderr");
  app.add_flag("--deterministic", g.deterministic, "Accepted for compatibility; execution is always single-threaded");

  // corpus tools
  auto* corpus = app.add_subcommand("corpus", "Corpus preparation");
  corpus->require_subcommand(1);
  std::string split_in, split_id, split_out;
  std::size_t top_k = 10;
  auto* split = corpus->add_subcommand("split-by-domain", "Split a url-bearing corpus by domain");
  split->add_option("--input", split_in, "TSV: source, target, url")->required();
  split->add_option("--corpus-id", split_id, "Corpus name")->required();
  split->add_option("--top-k", top_k, "Domains kept as separate tags")->capture_default_str();
  split->add_option("--output-dir", split_out, "One TSV per tag")->required();

  std::vector<std::string> mix_in;
  std::string mix_out;
  long long cap = 1000000;
  std::uint64_t mix_seed = 1;
  auto* mix = corpus->add_subcommand("build-mixture", "Cap and shuffle tagged corpora into a training mixture");
  mix->add_option("--inputs", mix_in, "TSV corpora; the file stem names the corpus")->required();
  mix->add_option("--cap", cap, "Records per tag")->capture_default_str();
  mix->add_option("--seed", mix_seed, "Sampling seed")->capture_default_str();
  mix->add_option("--output", mix_out, "Mixture TSV: tag, source, target")->required();

  // low-level training and inference
  std::string train_data, train_out;
  long train_steps = -1;
  long long train_seed = -1;
  auto* train = app.add_subcommand("train", "Train a tokenizer and model on a mixture TSV");
  train->add_option("--data", train_data, "Mixture TSV")->required();
  train->add_option("--steps", train_steps, "Override pretrain steps");
  train->add_option("--seed", train_seed, "Override the seed");
  train->add_option("--output-dir", train_out, "Model directory")->required();

  std::string dec_model, dec_in = "-", dec_out = "-", dec_tag;
  int beam = 0;
  auto* decode = app.add_subcommand("decode", "Translate lines with a trained model");
  decode->add_option("--model-dir", dec_model, "Model directory")->required();
  decode->add_option("--tag", dec_tag, "Inference tag");
  decode->add_option("--beam", beam, "Beam size (default from config)");
  decode->add_option("--input", dec_in, "Source lines (- for stdin)")->capture_default_str();
  decode->add_option("--output", dec_out, "Output lines (- for stdout)")->capture_default_str();

  std::string ft_method, ft_model, ft_data, ft_tag, ft_init = kRandomInit, ft_out;
  long ft_steps = -1;
  double ft_lr = -1;
  auto* ft = app.add_subcommand("finetune", "Fine-tune a model directory");
  ft->add_option("method", ft_method, "ocat | full | adapter | lora")
      ->required()
      ->check(CLI::IsMember({"ocat", "full", "adapter", "lora"}));
  ft->add_option("--model-dir", ft_model, "Model directory")->required();
  ft->add_option("--data", ft_data, "TSV: source, target")->required();
  ft->add_option("--tag", ft_tag, "OCAT target tag, or the tag appended for other methods");
  ft->add_option("--init-from", ft_init, "OCAT: tag whose row seeds the target, or 'random'")->capture_default_str();
  ft->add_option("--steps", ft_steps, "Fine-tune steps");
  ft->add_option("--lr", ft_lr, "Constant learning rate");
  ft->add_option("--output-dir", ft_out, "Output model directory")->required();

  // synthetic experiment pipeline
  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpora");
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the tokenizer, the CAT model and the untagged model");
  auto* rank = app.add_subcommand("rank-tags", "Rank corpus tags on the dev set");
  auto* ocat = app.add_subcommand("ocat", "Tag table with no-CAT, every CAT tag and CAT+OCAT");
  auto* baselines = app.add_subcommand("baselines", "OCAT vs full, adapter and LoRA fine-tuning, and the overfit probe");
  auto* sweep_st = app.add_subcommand("sweep-stability", "Fine-tune lr x steps grid for every method");
  std::vector<int> sizes;
  auto* sweep_sz = app.add_subcommand("sweep-size", "OCAT on growing fine-tune sets");
  sweep_sz->add_option("--sizes", sizes, "Fine-tune set sizes (default from config)")->delimiter(',');
  auto* report = app.add_subcommand("report", "Run every experiment and emit all reports");

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_config(g.config);
    cfg.task.validate();

    if (split->parsed()) {
      auto in = ingest_tsv(fs::path(split_in), split_id);
      fs::create_directories(split_out);
      for (const auto& [tag, recs] : split_by_url_domain(in.records, top_k)) {
        write_tsv(fs::path(split_out) / (recs.front().corpus_id + ".tsv"), recs);
        std::cout << tag << '\t' << recs.size() << '\n';
      }
      if (in.malformed) std::cerr << in.malformed << " malformed lines skipped\n";
      return 0;
    }
    if (mix->parsed()) {
      std::map<std::string, std::vector<CorpusRecord>> corpora;
      TagRegistry reg;
      for (const auto& p : mix_in) {
        const auto id = fs::path(p).stem().string();
        reg.add_corpus(id, TagOrigin::NamedCorpus);
        corpora[reg.tag_for(id)] = ingest_tsv(fs::path(p), id).records;
      }
      const MixtureSpec spec{cap, mix_seed};
      const auto m = build_mixture(corpora, spec, reg);
      std::ofstream out(mix_out);
      if (!out) throw Error("cannot write " + mix_out);
      for (const auto& item : m) out << item.tag << '\t' << item.record.source << '\t' << item.record.target << '\n';
      std::cout << mixture_manifest(corpora, m, spec).dump(2) << '\n';
      return 0;
    }
    if (train->parsed()) {
      auto pspec = cfg.pretrain;
      if (train_steps >= 0) pspec.steps = train_steps;
      const std::uint64_t seed = train_seed >= 0 ? static_cast<std::uint64_t>(train_seed) : cfg.seed;
      const auto recs = read_tagged(train_data);
      std::vector<std::string> tags, text;
      std::set<std::string> seen;
      for (const auto& r : recs) {
        if (r.tag != "-" && seen.insert(r.tag).second) tags.push_back(r.tag);
        text.push_back(r.record.source);
        text.push_back(r.record.target);
      }
      if (!seen.count(kHqTag)) tags.push_back(kHqTag);
      const Tokenizer tok = train_subword(text, cfg.model.vocab_size, tags);
      std::vector<TaggedExample> ex;
      for (const auto& r : recs)
        ex.push_back(r.tag == "-" ? make_untagged(r.record, tok) : inject_tag(r.record, r.tag, tok));
      const fs::path out(train_out);
      auto params = pretrain(cfg.model, pspec, std::move(ex), seed, out / "ckpt", g.verbose);
      save_model_dir(out, {cfg.model, std::move(params), pspec.steps, cfg.model.hash()}, tok);
      return 0;
    }
    if (decode->parsed()) {
      const auto md = load_model_dir(dec_model);
      DecodeConfig dc = cfg.decode;
      if (!dec_tag.empty()) dc.inference_tag = dec_tag;
      if (beam > 0) dc.beam_size = beam;
      write_lines(dec_out, decode_corpus(md.ckpt.config, md.ckpt.params, read_lines(dec_in), dc, md.tok));
      return 0;
    }
    if (ft->parsed()) {
      auto md = load_model_dir(ft_model);
      const auto data = ingest_tsv(fs::path(ft_data), "finetune").records;
      FinetuneOptions opt = ft_method == "ocat" ? cfg.ocat : cfg.baseline;
      if (ft_method == "full") opt.lr = cfg.full_ft_lr;
      if (ft_steps >= 0) opt.steps = ft_steps;
      if (ft_lr > 0) opt.lr = ft_lr;
      const auto& mc = md.ckpt.config;
      const std::optional<std::string> tag = ft_tag.empty() ? std::nullopt : std::optional<std::string>(ft_tag);
      FinetuneResult<float> res;
      if (ft_method == "ocat") {
        OcatPlan plan;
        plan.target_tag = tag.value_or(kHqTag);
        plan.init_from = ft_init;
        plan.finetune_data = data;
        plan.options = opt;
        res = ocat_finetune(mc, std::move(md.ckpt.params), plan, md.tok);
      } else if (ft_method == "full") {
        res = full_finetune(mc, std::move(md.ckpt.params), data, md.tok, tag, opt);
      } else if (ft_method == "adapter") {
        res = adapter_finetune(mc, std::move(md.ckpt.params), cfg.adapter, data, md.tok, tag, opt);
      } else {
        res = lora_finetune(mc, std::move(md.ckpt.params), cfg.lora, data, md.tok, tag, opt);
      }
      std::cout << "trainable parameters: " << res.trainable << '\n';
      save_model_dir(ft_out, {mc, std::move(res.params), md.ckpt.step + opt.steps, mc.hash()}, md.tok);
      return 0;
    }

    Lab lab(cfg, g.workdir, g.verbose);
    std::ofstream(lab.workdir() / "config.json") << cfg.to_json().dump(2) << '\n';
    if (synth->parsed()) {
      const auto& d = lab.data();
      for (const auto& [name, recs] : d.corpora) std::cout << name << '\t' << recs.size() << '\n';
      std::cout << "dev\t" << d.dev.size() << "\ntest\t" << d.test.size() << "\npool\t" << d.pool.size() << '\n';
      return 0;
    }
    if (pretrain_cmd->parsed()) {
      lab.cat_model();
      lab.base_model();
      std::cout << "models in " << lab.workdir().string() << '\n';
      return 0;
    }
    if (rank->parsed()) return emit({rank_tags_report(lab)}, {}, lab, false);
    if (ocat->parsed()) {
      auto r = run_cat_experiment(lab);
      return emit({r}, {check_tag_sensitivity(r, cfg), check_ocat_improvement(r)}, lab, g.check);
    }
    if (baselines->parsed()) {
      auto o = run_overfit(lab);
      return emit({run_finetune_table(lab), o}, {check_overfit(o)}, lab, g.check);
    }
    if (sweep_st->parsed()) {
      auto r = sweep_stability(lab);
      return emit({r}, {check_stability(r, cfg.ocat.steps)}, lab, g.check);
    }
    if (sweep_sz->parsed()) {
      auto r = sweep_finetune_size(lab, sizes.empty() ? cfg.sizes : sizes);
      return emit({r}, {check_size_sweep(r)}, lab, g.check);
    }
    if (report->parsed()) {
      auto cat = run_cat_experiment(lab);
      auto over = run_overfit(lab);
      auto sweep = sweep_stability(lab);
      auto size = sweep_finetune_size(lab, cfg.sizes);
      return emit({rank_tags_report(lab), cat, run_finetune_table(lab), over, sweep, size},
                  {check_tag_sensitivity(cat, cfg), check_ocat_improvement(cat), check_overfit(over),
                   check_stability(sweep, cfg.ocat.steps), check_size_sweep(size)},
                  lab, g.check);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
