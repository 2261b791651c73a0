#include "kgcg/demo.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "kgcg/checkpoint.hpp"
#include "kgcg/decoding.hpp"
#include "kgcg/error.hpp"

namespace kgcg {

DemoConfig default_demo_config() {
  DemoConfig cfg;
  cfg.model.d_model = 64;
  cfg.model.n_heads = 4;
  cfg.model.d_ff = 128;
  cfg.model.enc_layers = 2;
  cfg.model.dec_layers = 2;
  cfg.model.graph_layers = 2;
  cfg.model.max_len = 16;
  cfg.model.dropout = 0.0;
  cfg.train.learning_rate = 1e-3;
  cfg.train.batch_size = 16;
  cfg.train.max_steps = 2500;
  cfg.train.eval_every = 250;
  cfg.train.seed = cfg.seed;
  cfg.grounding.node_budget = 8;
  cfg.grounding.fanout = 0;  // the direct inter-concept edge carries the signal
  return cfg;
}

std::vector<std::string> generate_lines(const Parameters<float>& params, const Vocabulary& vocab,
                                        const Corpus& corpus, const KnowledgeGraph& graph,
                                        const GroundingConfig& gcfg, bool strip_graph,
                                        size_t beam, size_t max_len, double length_alpha) {
  require(beam >= 1, "generate: beam must be positive");
  require(vocab.size() == params.config.vocab_size,
          "generate: vocabulary does not match the model");
  std::vector<std::string> out(corpus.size());
  std::string first_error;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long long i = 0; i < static_cast<long long>(corpus.size()); ++i) {
    try {
      const Example& ex = corpus[static_cast<size_t>(i)];
      ConceptSubgraph sg = build_subgraph(ex.concepts, graph, gcfg.node_budget, gcfg.fanout);
      if (strip_graph) sg = strip_to_self_loops(sg);
      EncodedExample enc = encode_example(ex, sg, vocab, params.config.max_len);
      GraphInput gi = make_graph_input(sg, enc);
      Hypothesis hyp;
      if (beam == 1) {
        hyp = greedy_decode(params, enc.input_ids, gi, max_len);
      } else {
        auto hyps = beam_search(params, enc.input_ids, gi, beam, max_len, length_alpha);
        require(!hyps.empty(), "generate: beam search returned no hypotheses");
        hyp = hyps.front();
      }
      std::vector<std::string> words;
      for (size_t t = 1; t < hyp.tokens.size(); ++t) {  // skip BOS
        const TokenId id = hyp.tokens[t];
        if (id == Vocabulary::kEos) break;
        words.push_back(vocab.token(id));
      }
      out[static_cast<size_t>(i)] = detokenize(words);
    } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (first_error.empty())
        first_error = "example " + std::to_string(i) + ": " + e.what();
    }
  }
  if (!first_error.empty()) fail("generate: " + first_error);
  return out;
}

double middle_token_accuracy(const std::vector<std::string>& predictions, const Corpus& corpus) {
  require(predictions.size() == corpus.size(),
          "middle-token accuracy: prediction count " + std::to_string(predictions.size()) +
              " does not match reference count " + std::to_string(corpus.size()));
  require(!corpus.empty(), "middle-token accuracy: empty corpus");
  size_t hits = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const auto pred = tokenize(predictions[i]);
    const auto ref = tokenize(corpus[i].references.at(0));
    if (pred.size() >= 2 && ref.size() >= 2 && pred[1] == ref[1]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

namespace {

void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write file: " + path);
  for (const std::string& l : lines) out << l << '\n';
  if (!out) fail("failed writing file: " + path);
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write file: " + path);
  out << text;
  if (!out) fail("failed writing file: " + path);
}

}  // namespace

AblationResult run_synth_ablation(const DemoConfig& cfg) {
  require(!cfg.out_dir.empty(), "demo: output directory is required");
  require(cfg.n_train >= 1 && cfg.n_test >= 1, "demo: train and test splits must be non-empty");
  cfg.grounding.validate();
  std::filesystem::create_directories(cfg.out_dir);
  const auto path_in = [&](const std::string& name) {
    return (std::filesystem::path(cfg.out_dir) / name).string();
  };

  AblationResult res;
  res.n_train = cfg.n_train;
  res.n_test = cfg.n_test;
  res.kg_tsv = path_in("kg.tsv");
  res.train_jsonl = path_in("train.jsonl");
  res.test_jsonl = path_in("test.jsonl");

  SynthData sd = synth_corpus(cfg.n_entities, cfg.n_relations, cfg.n_train + cfg.n_test, cfg.seed);
  dump_tsv(sd.graph, res.kg_tsv);
  Corpus train_corpus(sd.corpus.begin(), sd.corpus.begin() + static_cast<long>(cfg.n_train));
  Corpus test_corpus(sd.corpus.begin() + static_cast<long>(cfg.n_train), sd.corpus.end());
  save_jsonl(train_corpus, res.train_jsonl);
  save_jsonl(test_corpus, res.test_jsonl);
  log_info("demo: wrote " + res.kg_tsv + ", " + res.train_jsonl + ", " + res.test_jsonl);
  if (cfg.data_only) return res;

  // the dumped TSV is the relation-id authority from here on
  KnowledgeGraph graph = load_tsv(res.kg_tsv);

  PreparedData kg_data =
      prepare_data(train_corpus, graph, cfg.grounding, cfg.model.max_len, false);
  PreparedData blind_data = prepare_data(train_corpus, graph, cfg.grounding, cfg.model.max_len,
                                         true, &kg_data.vocab);

  ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = kg_data.vocab.size();
  mcfg.n_relations = kg_data.n_relations;
  mcfg.validate();

  struct Side {
    const char* tag;
    const std::vector<TrainItem>* items;
    bool strip;
    AblationSide* out;
  };
  Side sides[2] = {{"kg", &kg_data.items, false, &res.kg},
                   {"blind", &blind_data.items, true, &res.blind}};
  for (Side& side : sides) {
    log_info(std::string("demo: training the ") + side.tag + " model (" +
             std::to_string(cfg.train.max_steps) + " steps)");
    TrainResult<float> tr = train_loop<float>(*side.items, mcfg, cfg.train);
    side.out->final_loss = tr.loss_trace.empty() ? 0.0 : tr.loss_trace.back();
    side.out->ckpt_path = path_in(std::string(side.tag) + "_model.ckpt");
    save_checkpoint(tr.params, side.out->ckpt_path, kg_data.vocab.all_tokens());
    save_opt_state(tr.adam, mcfg, opt_state_path(side.out->ckpt_path));

    std::vector<std::string> preds =
        generate_lines(tr.params, kg_data.vocab, test_corpus, graph, cfg.grounding, side.strip,
                       cfg.beam, mcfg.max_len, cfg.length_alpha);
    side.out->pred_path = path_in(std::string(side.tag) + "_predictions.txt");
    write_lines(preds, side.out->pred_path);

    ModelEmbedProvider embed_provider(tr.params.tensors.at("embed.token"), kg_data.vocab);
    side.out->report = evaluate_lines(preds, test_corpus, embed_provider);
    side.out->report_path = path_in(std::string(side.tag) + "_report.json");
    write_text(report_json(side.out->report) + "\n", side.out->report_path);
    side.out->middle_token_accuracy = middle_token_accuracy(preds, test_corpus);

    std::cout << side.tag << " model after " << cfg.train.max_steps
              << " steps: final loss " << side.out->final_loss << "\n"
              << report_table(side.out->report);
    std::printf("%s middle-token accuracy: %.2f%%\n\n", side.tag,
                100.0 * side.out->middle_token_accuracy);
  }

  nlohmann::json summary;
  for (const Side& side : sides) {
    nlohmann::json rep = nlohmann::json::parse(report_json(side.out->report));
    summary[side.tag] = {{"middle_token_accuracy",
                          std::round(side.out->middle_token_accuracy * 10000.0) / 100.0},
                         {"final_loss", side.out->final_loss},
                         {"checkpoint", side.out->ckpt_path},
                         {"predictions", side.out->pred_path},
                         {"report", rep}};
  }
  summary["n_train"] = res.n_train;
  summary["n_test"] = res.n_test;
  summary["n_entities"] = cfg.n_entities;
  summary["n_relations"] = cfg.n_relations;
  summary["seed"] = cfg.seed;
  res.ablation_json = path_in("ablation.json");
  write_text(summary.dump(2) + "\n", res.ablation_json);
  log_info("demo: wrote " + res.ablation_json);
  return res;
}

}  // namespace kgcg
