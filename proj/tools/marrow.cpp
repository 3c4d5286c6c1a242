// marrow: command-line front end for the retrieval pipeline.
//
//   marrow <subcommand> [--config FILE] [--section.key value ...]
//
// Exit codes: 0 success, 2 config error, 3 dependency error, 4 data error
// (and other library errors), 1 anything unexpected.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "marrow/config.hpp"
#include "marrow/error.hpp"
#include "marrow/pipeline.hpp"

namespace {

/// Applies "--section.key value" and "--section.key=value" pairs.
void apply_overrides(marrow::Settings& settings, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() < 3)
      throw marrow::ConfigError("unexpected argument '" + arg + "'; overrides look like --section.key value");
    std::string key = arg.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw marrow::ConfigError("override --" + key + " is missing its value");
      value = extras[++i];
    }
    settings.set(key, value);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"marrow: dense retrieval and reranking pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::string target;

  struct Command {
    std::string name, help;
  };
  const std::vector<Command> commands = {
      {"ingest", "load corpus, queries and qrels into the workdir"},
      {"build-vocab", "build the token vocabulary"},
      {"bm25", "build the BM25 index and lexical runs"},
      {"mine", "mine hard negatives (--target retriever|reranker)"},
      {"train-retriever", "train the bi-encoder retriever"},
      {"encode", "embed the corpus with the retriever"},
      {"index", "build the flat index from embeddings"},
      {"retrieve", "dense retrieval for train and eval queries"},
      {"train-reranker", "train the pointwise reranker"},
      {"rerank", "rerank the top candidates of the eval run"},
      {"eval", "score every eval run against the qrels"},
      {"run", "run every stage in order"},
      {"doc-compare", "compare whole-document and MaxP retrieval"},
      {"ablation-lora", "full fine-tuning vs LoRA"},
      {"ablation-length", "reranker train/eval input-length grid"},
      {"gen-synthetic", "write the synthetic vocabulary-mismatch task"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "INI config file");
    sub->allow_extras();
    if (c.name == "mine")
      sub->add_option("--target", target, "which model the negatives are for")
          ->required()
          ->check(CLI::IsMember({"retriever", "reranker"}));
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = nullptr;
    for (auto* s : subs)
      if (s->parsed()) sub = s;
    marrow::Settings settings = config_path.empty() ? marrow::Settings{} : marrow::Settings::load(config_path);
    apply_overrides(settings, sub->remaining());
    const auto cfg = marrow::PipelineConfig::from_settings(settings);
    if (const auto unused = settings.unused(); !unused.empty()) {
      std::string list;
      for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
      throw marrow::ConfigError("unknown setting(s): " + list);
    }

    const std::string name = sub->get_name();
    if (name == "gen-synthetic") {
      marrow::write_synthetic(cfg.synthetic, cfg.synthetic_out);
      std::cout << "gen-synthetic: " << cfg.synthetic.docs << " documents, " << cfg.synthetic.train_queries
                << " train and " << cfg.synthetic.eval_queries << " eval queries in " << cfg.synthetic_out.string()
                << "\n";
      return 0;
    }
    marrow::Pipeline pipeline(cfg);
    if (name == "run") pipeline.run_all();
    else if (name == "mine") pipeline.run_stage("mine-" + target);
    else pipeline.run_stage(name);
    return 0;
  } catch (const marrow::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return marrow::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
