#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "minimt/commands.hpp"
#include "minimt/io.hpp"
#include "minimt/server.hpp"
#include "minimt/translator.hpp"

using namespace minimt;
using json = nlohmann::json;
namespace fs = std::filesystem;
using Flags = std::vector<std::pair<std::string, std::string>>;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("minimt_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  for (const auto& l : lines) out << l << '\n';
}

Config cfg(const Flags& flags) { return resolve_config(nullptr, flags); }

int cli(std::vector<std::string> args, std::string* out = nullptr, std::string* err = nullptr) {
  args.insert(args.begin(), "minimt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return rc;
}

const std::vector<std::string> kToySrc = {"a b c",   "b c d", "c d e", "a a b",   "e d c b",
                                          "d e",     "a c e", "b d",   "c c c a", "e a"};

// Corpus, manifest and a briefly trained small model in `dir`.
fs::path small_model(const fs::path& dir, std::size_t epochs = 1) {
  write_lines(dir / "src.txt", kToySrc);
  write_lines(dir / "tgt.txt", kToySrc);
  std::ostringstream log;
  cmd_preprocess(cfg({{"train_src", (dir / "src.txt").string()},
                      {"train_tgt", (dir / "tgt.txt").string()},
                      {"valid_src", (dir / "src.txt").string()},
                      {"valid_tgt", (dir / "tgt.txt").string()},
                      {"save_data", (dir / "data").string()}}),
                 log);
  cmd_train(cfg({{"data", (dir / "data").string()},
                 {"save_model", (dir / "m").string()},
                 {"rnn_size", "8"},
                 {"emb_size", "6"},
                 {"epochs", std::to_string(epochs)},
                 {"batch_size", "4"},
                 {"dropout", "0"}}),
            log);
  return dir / ("m_e" + std::to_string(epochs) + ".mnmt");
}

}  // namespace

TEST_CASE("shipped configs match the compiled defaults") {
  const fs::path root = MINIMT_SOURCE_DIR;
  const json shipped = read_config_file(root / "configs" / "default.json");
  const json bpe = read_config_file(root / "configs" / "bpe.json");
  CHECK(shipped == default_config());
  CHECK(bpe == bpe_preset());
  CHECK(shipped.at("beam_size") == 5);
  CHECK(shipped.at("batch_size") == 64);
  CHECK(shipped.at("dropout") == 0.1);
  CHECK(shipped.at("max_len") == 50);
  CHECK(bpe.at("max_len") == 100);
  CHECK(shipped.at("optim") == "sgd");
  CHECK(shipped.at("learning_rate") == 1.0);
  CHECK(shipped.at("decay_factor") == 0.5);
}

TEST_CASE("config layering") {
  const json file = {{"beam_size", 7}, {"dropout", 0}, {"optim", "adam"}};
  const Config c = resolve_config(&file, {{"beam_size", "9"}, {"copy", ""}});
  CHECK(c.size("beam_size") == 9);
  CHECK(c.number("dropout") == 0.0);
  CHECK(c.flag("copy"));
  CHECK(c.size("batch_size") == 64);
  CHECK(c.is_explicit("optim"));
  CHECK_FALSE(c.is_explicit("batch_size"));

  // Adam without an explicit rate uses its own default.
  TrainOptions o = train_options_from(c);
  CHECK(o.learning_rate == 0.0);
  CHECK(train_options_from(resolve_config(&file, {{"learning_rate", "0.01"}})).learning_rate == 0.01);

  CHECK_THROWS_AS(resolve_config(nullptr, {{"nope", "1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config(nullptr, {{"beam_size", "five"}}), ConfigError);
  const json bad = {{"beam_size", "5"}};
  CHECK_THROWS_AS(resolve_config(&bad, {}), ConfigError);
  const json unknown = {{"beam", 5}};
  CHECK_THROWS_AS(resolve_config(&unknown, {}), ConfigError);
  CHECK_THROWS_AS(decode_options_from(cfg({{"n_best", "6"}})), DecodeError);
}

TEST_CASE("preprocess a toy corpus") {
  const auto dir = temp_dir("pre");
  write_lines(dir / "src.txt", kToySrc);
  write_lines(dir / "tgt.txt", kToySrc);
  const Flags flags = {{"train_src", (dir / "src.txt").string()},
                       {"train_tgt", (dir / "tgt.txt").string()},
                       {"save_data", (dir / "out" / "data").string()}};
  std::ostringstream log;
  const auto r = cmd_preprocess(cfg(flags), log);
  const auto m = load_manifest(r.manifest);
  CHECK(m.train_shards.size() == 1);
  CHECK(m.train_sizes == std::vector<std::size_t>{10});
  CHECK(m.valid_shards.empty());
  // Counts: c 7, a 5, b 5, d 5, e 5; ties in first-occurrence order.
  const auto v = load_vocabs(r.manifest, m);
  CHECK(v.src.tokens() ==
        std::vector<std::string>{"<blank>", "<unk>", "<s>", "</s>", "c", "a", "b", "d", "e"});
  CHECK(json::parse(m.config).at("train_src") == (dir / "src.txt").string());

  std::map<fs::path, std::string> first;
  for (const auto& e : fs::directory_iterator(dir / "out")) first[e.path()] = read_file(e.path());
  cmd_preprocess(cfg(flags), log);
  std::size_t same = 0;
  for (const auto& e : fs::directory_iterator(dir / "out")) {
    same += first.count(e.path()) && first[e.path()] == read_file(e.path());
  }
  CHECK(same == first.size());

  write_lines(dir / "short.txt", {"a", "b", "c"});
  std::string err;
  CHECK(cli({"preprocess", "--train_src", (dir / "src.txt").string(), "--train_tgt",
             (dir / "short.txt").string(), "--save_data", (dir / "bad" / "d").string()},
            nullptr, &err) != 0);
  CHECK(err.find("line 4") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "bad" / "d.manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("preprocess with tokenization and BPE") {
  const auto dir = temp_dir("bpe");
  const std::vector<std::string> lines = {"Hello, world!", "lower lowest newer", "newest lower.",
                                          "Hello again, newer world."};
  write_lines(dir / "src.txt", lines);
  write_lines(dir / "tgt.txt", lines);
  std::ostringstream log;
  const auto r = cmd_preprocess(cfg({{"train_src", (dir / "src.txt").string()},
                                     {"train_tgt", (dir / "tgt.txt").string()},
                                     {"save_data", (dir / "d").string()},
                                     {"tokenize", "true"},
                                     {"bpe_merges", "10"}}),
                                log);
  const auto m = load_manifest(r.manifest);
  const auto p = TextPipeline::from_json(m.pipeline);
  CHECK(p.tokenize);
  REQUIRE(p.bpe);
  CHECK(p.bpe->size() > 0);
  for (const auto& l : lines) CHECK(p.decode(p.encode(l)) == l);
  // Scratch files are gone.
  for (const auto& e : fs::directory_iterator(dir)) {
    CHECK(e.path().filename().string().find(".tmp.") == std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("train writes checkpoints, resumes like a continuous run") {
  const auto dir = temp_dir("train");
  write_lines(dir / "src.txt", kToySrc);
  write_lines(dir / "tgt.txt", kToySrc);
  std::ostringstream log;
  cmd_preprocess(cfg({{"train_src", (dir / "src.txt").string()},
                      {"train_tgt", (dir / "tgt.txt").string()},
                      {"save_data", (dir / "data").string()}}),
                 log);
  const Flags base = {{"data", (dir / "data").string()}, {"rnn_size", "8"}, {"emb_size", "6"},
                      {"batch_size", "3"}};
  auto with = [&](Flags extra) {
    Flags f = base;
    f.insert(f.end(), extra.begin(), extra.end());
    return cfg(f);
  };

  cmd_train(with({{"save_model", (dir / "zero").string()}, {"epochs", "0"}}), log);
  CHECK(fs::exists(dir / "zero_e0.mnmt"));
  CHECK_FALSE(fs::exists(dir / "zero_e1.mnmt"));

  cmd_train(with({{"save_model", (dir / "full").string()}, {"epochs", "3"}}), log);
  cmd_train(with({{"save_model", (dir / "part").string()}, {"epochs", "1"}}), log);
  cmd_train(with({{"save_model", (dir / "part").string()},
                  {"epochs", "3"},
                  {"from", (dir / "part_e1.mnmt").string()}}),
            log);
  const auto a = load_checkpoint(dir / "full_e3.mnmt");
  const auto b = load_checkpoint(dir / "part_e3.mnmt");
  REQUIRE(a.model.params().size() == b.model.params().size());
  bool equal = true;
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    auto x = a.model.params()[i].value.data();
    auto y = b.model.params()[i].value.data();
    equal &= std::equal(x.begin(), x.end(), y.begin(), y.end());
  }
  CHECK(equal);
  CHECK(a.state.step == b.state.step);

  const json meta = json::parse(a.metadata);
  CHECK(meta.at("config").at("rnn_size") == 8);
  const json side = json::parse(read_file(dir / "full_e3.mnmt.json"));
  CHECK(side.at("metadata") == meta);

  CHECK_THROWS_AS(cmd_train(with({{"save_model", (dir / "x").string()},
                                  {"data", (dir / "missing").string()}}),
                            log),
                  DataError);
  fs::remove_all(dir);
}

TEST_CASE("translate output formats") {
  const auto dir = temp_dir("translate");
  const auto model = small_model(dir);
  write_lines(dir / "in.txt", {"a b c", "d e", "", "c"});
  std::string out, err;
  REQUIRE(cli({"translate", "--model", model.string(), "--src", (dir / "in.txt").string(),
               "--output", (dir / "out.txt").string()}) == 0);
  CHECK(read_lines(dir / "out.txt").size() == 4);
  CHECK(read_lines(dir / "out.txt")[2].empty());

  REQUIRE(cli({"translate", "--model", model.string(), "--src", (dir / "in.txt").string(),
               "--n_best", "3", "--dump_beam", (dir / "beam.json").string()},
              &out) == 0);
  std::istringstream lines(out);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  // The blank input line yields a single entry.
  REQUIRE(rows.size() == 3 + 3 + 1 + 3);
  for (std::size_t k = 0; k < 3; ++k) CHECK(rows[k].rfind(std::to_string(k + 1) + " ||| ", 0) == 0);
  std::size_t bars = 0;
  for (std::size_t i = 0; i + 2 < rows[0].size(); ++i) bars += rows[0].compare(i, 3, "|||") == 0;
  CHECK(bars == 3);
  const json beam = json::parse(read_file(dir / "beam.json"));
  REQUIRE(beam.size() == 4);
  const auto& attn = beam[0].at("attn");
  CHECK(attn.size() == beam[0].at("tgt").size() + 1);  // </s> row included
  for (const auto& row : attn) CHECK(row.size() == 3);

  write_lines(dir / "empty.txt", {});
  REQUIRE(cli({"translate", "--model", model.string(), "--src", (dir / "empty.txt").string(),
               "--output", (dir / "empty.out").string()}) == 0);
  CHECK(read_file(dir / "empty.out").empty());

  // An over-long line fails the command and leaves no output behind.
  std::string longline;
  for (int i = 0; i < 60; ++i) longline += "a ";
  write_lines(dir / "long.txt", {"a b", longline});
  CHECK(cli({"translate", "--model", model.string(), "--src", (dir / "long.txt").string(),
             "--output", (dir / "long.out").string()},
            nullptr, &err) != 0);
  CHECK(err.find("line 2") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "long.out"));

  // A sidecar that disagrees with the checkpoint is refused.
  fs::copy_file(model, dir / "odd.mnmt");
  json side = json::parse(read_file(model.string() + ".json"));
  side["config_hash"] = "0000000000000000";
  write_file_atomic(dir / "odd.mnmt.json", side.dump());
  CHECK(cli({"translate", "--model", (dir / "odd.mnmt").string(), "--src",
             (dir / "in.txt").string()},
            &out, &err) != 0);
  CHECK(err.find("config hash") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("embedding export and import") {
  const auto dir = temp_dir("emb");
  // Two words plus the four reserved tokens.
  write_lines(dir / "src.txt", {"x y", "y x"});
  write_lines(dir / "tgt.txt", {"x y", "y x"});
  std::ostringstream log;
  cmd_preprocess(cfg({{"train_src", (dir / "src.txt").string()},
                      {"train_tgt", (dir / "tgt.txt").string()},
                      {"save_data", (dir / "data").string()}}),
                 log);
  cmd_train(cfg({{"data", (dir / "data").string()},
                 {"save_model", (dir / "m").string()},
                 {"rnn_size", "8"},
                 {"emb_size", "5"},
                 {"epochs", "0"}}),
            log);
  const std::string model = (dir / "m_e0.mnmt").string();
  const auto initial = load_checkpoint(model);
  const auto before = initial.model.param("src_emb").data();
  const std::vector<double> original(before.begin(), before.end());

  std::string err;
  REQUIRE(cli({"embeddings", "export", "--model", model, "--vectors", (dir / "v.txt").string()}) == 0);
  CHECK(read_lines(dir / "v.txt").size() == 6);
  REQUIRE(cli({"embeddings", "import", "--model", model, "--vectors", (dir / "v.txt").string(),
               "--output", (dir / "r.mnmt").string()},
              nullptr, &err) == 0);
  CHECK(err.find("6 loaded, 0 kept") != std::string::npos);
  const auto round_trip = load_checkpoint(dir / "r.mnmt");
  const auto after = round_trip.model.param("src_emb").data();
  CHECK(std::equal(after.begin(), after.end(), original.begin(), original.end()));

  write_lines(dir / "two.txt", {"x 1 2 3 4 5", "y 0.5 0.5 0.5 0.5 0.5", "zzz 9 9 9 9 9"});
  REQUIRE(cli({"embeddings", "import", "--model", model, "--vectors", (dir / "two.txt").string(),
               "--output", (dir / "t.mnmt").string()},
              nullptr, &err) == 0);
  CHECK(err.find("2 loaded, 4 kept") != std::string::npos);
  const auto ck = load_checkpoint(dir / "t.mnmt");
  const auto emb = ck.model.param("src_emb").data();
  const auto x = static_cast<std::size_t>(ck.vocabs->src.id("x"));
  CHECK(emb[x * 5 + 4] == 5.0);
  CHECK(emb[0] == original[0]);

  const std::string bytes = read_file(model);
  write_lines(dir / "bad.txt", {"x 1 2 3"});
  CHECK(cli({"embeddings", "import", "--model", model, "--vectors", (dir / "bad.txt").string()},
            nullptr, &err) != 0);
  CHECK(read_file(model) == bytes);
  write_lines(dir / "dup.txt", {"x 1 2 3 4 5", "x 1 2 3 4 5"});
  CHECK(cli({"embeddings", "import", "--model", model, "--vectors", (dir / "dup.txt").string()},
            nullptr, &err) != 0);
  CHECK(err.find("duplicate") != std::string::npos);
  CHECK(read_file(model) == bytes);
  fs::remove_all(dir);
}

TEST_CASE("translation service matches the command line") {
  const auto dir = temp_dir("serve");
  const auto model = small_model(dir, 2);
  const Translator tr = Translator::load(model);
  DecodeOptions opts;
  opts.n_best = 2;
  const TranslationService service(tr, opts);

  std::vector<std::string> lines = {"a b c", "e d", "b b b b", "", "c a e"};
  write_lines(dir / "in.txt", lines);
  std::string out;
  REQUIRE(cli({"translate", "--model", model.string(), "--src", (dir / "in.txt").string(),
               "--n_best", "2"},
              &out) == 0);

  json req = json::array();
  for (std::size_t i = 0; i < lines.size(); ++i) req.push_back({{"id", i}, {"src", lines[i]}});
  const HttpReply reply = service.translate(req.dump());
  REQUIRE(reply.status == 200);
  const json res = json::parse(reply.body);
  std::string rebuilt;
  for (std::size_t i = 0; i < res.size(); ++i) {
    CHECK(res[i].at("id") == i);
    Translation t;
    for (const auto& e : res[i].at("n_best")) {
      t.n_best.push_back({e.at("tgt").get<std::string>(), e.at("score").get<double>(),
                          e.at("raw_score").get<double>()});
    }
    rebuilt += nbest_lines(t);
  }
  CHECK(rebuilt == out);

  SUBCASE("errors") {
    CHECK(service.translate("{bad").status == 400);
    CHECK(service.translate("42").status == 400);
    std::string longline;
    for (int i = 0; i < 51; ++i) longline += "a ";
    const json mixed = json::array({{{"id", "x"}, {"src", longline}},
                                    {{"id", "y"}, {"src", "a b"}},
                                    {{"id", "z"}, {"src", "a"}, {"opts", {{"beam", 3}}}}});
    const json r = json::parse(service.translate(mixed.dump()).body);
    CHECK(r[0].contains("error"));
    CHECK(r[1].contains("tgt"));
    CHECK(r[2].at("error").get<std::string>().find("beam") != std::string::npos);
  }

  SUBCASE("health and HTTP transport") {
    const json side = json::parse(read_file(model.string() + ".json"));
    const json h = json::parse(service.health().body);
    CHECK(h.at("config_hash") == side.at("config_hash"));
    CHECK(h.at("api_version") == 1);

    HttpServer server(service, 2);
    const int port = server.bind("127.0.0.1", 0);
    std::thread t([&] { server.listen(); });
    httplib::Client client("127.0.0.1", port);
    auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    auto single = client.Post("/translate", json{{"id", 7}, {"src", "a b c"}}.dump(),
                              "application/json");
    REQUIRE(single);
    const json one = json::parse(single->body);
    CHECK(one.at("id") == 7);
    CHECK(one.at("tgt") == res[0].at("tgt"));
    CHECK(one.at("score") == res[0].at("score"));
    auto bad = client.Post("/translate", "[1,", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    server.stop();
    t.join();
  }
  fs::remove_all(dir);
}

TEST_CASE("command line exit codes") {
  std::string out, err;
  CHECK(cli({}, &out, &err) != 0);
  CHECK(cli({"translate", "--nope", "1"}, &out, &err) != 0);
  CHECK(cli({"translate", "--model", "/nonexistent.mnmt", "--src", "/nonexistent.txt"}, &out, &err) != 0);
  CHECK(cli({"train"}, &out, &err) != 0);
  CHECK(cli({"preprocess", "--config", "/nonexistent.json"}, &out, &err) != 0);
  CHECK(cli({"translate", "--help"}, &out, &err) == 0);
  CHECK(out.find("--beam_size") != std::string::npos);
}
