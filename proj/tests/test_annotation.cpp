#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <doctest.h>

#include "moetune/annotation.hpp"

using namespace moetune;
namespace fs = std::filesystem;

namespace {

AnnotationItem item(const std::string& id, const std::string& vt = "reentrancy") {
  return {id, "function pull(){ msg.sender.call{value:bal}(); bal=0; }", vt};
}

ScriptedGenerator echo_gen(const std::string& id) {
  return ScriptedGenerator(id, [id](const std::string&) { return "explanation from " + id; });
}

QualityScore score_all(int v) {
  QualityScore s;
  s.correctness = s.completeness = s.conciseness = v;
  return s;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("moetune_ann_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("label-guided prompts carry the class directive") {
  auto p = label_guided_prompt("reentrancy", "code");
  CHECK(p.find("ordering of external calls") != std::string::npos);
  CHECK(label_guided_prompt("timestamp", "code").find("block timestamp") != std::string::npos);
  CHECK(label_guided_prompt("delegatecall", "code").find("delegatecall") != std::string::npos);
}

TEST_CASE("generate_explanations: one candidate per generator") {
  auto a = echo_gen("generator-A");
  auto b = echo_gen("generator-B");
  auto res = generate_explanations(item("i1"), {&a, &b});
  REQUIRE(res.candidates.size() == 2);
  CHECK(res.failures.empty());
  CHECK(res.candidates[0].source_id == "generator-A");
}

TEST_CASE("generate_explanations: a failing client yields a failure record") {
  auto good = echo_gen("generator-A");
  ScriptedGenerator bad("generator-B",
                        [](const std::string&) -> std::string { throw std::runtime_error("down"); });
  auto res = generate_explanations(item("i2"), {&good, &bad});
  CHECK(res.candidates.size() == 1);
  REQUIRE(res.failures.size() == 1);
  CHECK(res.failures[0].source_id == "generator-B");
}

TEST_CASE("evaluate_explanations: higher scorer wins above the threshold") {
  auto a = echo_gen("generator-A");
  auto b = echo_gen("generator-B");
  auto cands = generate_explanations(item("i3"), {&a, &b}).candidates;
  ScriptedJudge judge([](const ExplanationCandidate& c) {
    return score_all(c.source_id == "generator-A" ? 7 : 5);
  });
  auto best = evaluate_explanations(cands, judge);
  REQUIRE(best.has_value());
  CHECK(best->candidate.source_id == "generator-A");
}

TEST_CASE("evaluate_explanations: both below 6 is judged out") {
  auto a = echo_gen("generator-A");
  auto b = echo_gen("generator-B");
  auto cands = generate_explanations(item("i4"), {&a, &b}).candidates;
  ScriptedJudge judge([](const ExplanationCandidate&) { return score_all(5); });
  CHECK_FALSE(evaluate_explanations(cands, judge).has_value());
}

TEST_CASE("evaluate_explanations: exact tie goes to generator-A") {
  auto a = echo_gen("generator-A");
  auto b = echo_gen("generator-B");
  auto cands = generate_explanations(item("i5"), {&a, &b}).candidates;
  ScriptedJudge judge([](const ExplanationCandidate&) { return score_all(6); });
  auto best = evaluate_explanations(cands, judge);
  REQUIRE(best.has_value());
  CHECK(best->candidate.source_id == "generator-A");
}

TEST_CASE("judge overall defaults to the dimension mean unless overridden") {
  QualityScore s;
  s.correctness = 4;
  s.completeness = 6;
  s.conciseness = 8;
  CHECK(s.overall() == doctest::Approx(6.0));
  s.overall_override = 9.5;
  CHECK(s.overall() == doctest::Approx(9.5));
  QualityScore bad = score_all(11);
  CHECK_THROWS(bad.validate());
}

TEST_CASE("expert verification: both accept emits the input text") {
  ExplanationCandidate c{"generator-A", "i6", "reentrancy", "the text"};
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedRefiner refiner([](const ExplanationCandidate& cc, const std::string&) {
    return cc.text + " (refined)";
  });
  auto out = expert_verification(c, ra, rb, refiner);
  CHECK_FALSE(out.pending);
  CHECK(out.final_text == "the text");
  CHECK_FALSE(out.refined_text.has_value());
}

TEST_CASE("expert verification: agreed needs-refinement goes through the refiner") {
  ExplanationCandidate c{"generator-A", "i7", "timestamp", "rough text"};
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::needs_refinement; },
                      "tighten the wording");
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::needs_refinement; });
  ScriptedRefiner refiner([](const ExplanationCandidate& cc, const std::string& fb) {
    return cc.text + " [" + fb + "]";
  });
  auto out = expert_verification(c, ra, rb, refiner);
  CHECK_FALSE(out.pending);
  REQUIRE(out.refined_text.has_value());
  CHECK(out.final_text == "rough text [tighten the wording]");
}

TEST_CASE("expert verification: disagreement without consensus holds the item") {
  ExplanationCandidate c{"generator-B", "i8", "delegatecall", "text"};
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::reject; });
  ScriptedRefiner refiner([](const ExplanationCandidate& cc, const std::string&) { return cc.text; });
  auto out = expert_verification(c, ra, rb, refiner);
  CHECK(out.pending);
}

TEST_CASE("expert verification: scripted consensus resolves a disagreement with an edit") {
  ExplanationCandidate c{"generator-A", "i9", "integer-overflow", "text"};
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B",
                      [](const ExplanationCandidate&) { return Verdict::needs_refinement; });
  ScriptedRefiner refiner([](const ExplanationCandidate& cc, const std::string& fb) {
    return cc.text + " +" + fb;
  });
  ConsensusFn consensus = [](const ExplanationCandidate&, Verdict, Verdict) {
    return std::optional<std::string>("accept with edit");
  };
  auto out = expert_verification(c, ra, rb, refiner, consensus);
  CHECK_FALSE(out.pending);
  REQUIRE(out.consensus_record.has_value());
  CHECK(out.final_text.find("+") != std::string::npos);
}

TEST_CASE("run_pipeline: all-accept mocks produce full stage counts and valid audits") {
  TempDir dir;
  std::vector<AnnotationItem> items;
  for (int i = 0; i < 10; ++i) items.push_back(item("it" + std::to_string(i)));

  auto ga = echo_gen("generator-A");
  auto gb = echo_gen("generator-B");
  ScriptedJudge judge([](const ExplanationCandidate&) { return score_all(8); });
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedRefiner refiner([](const ExplanationCandidate& c, const std::string&) { return c.text; });
  PipelineClients clients{{&ga, &gb}, &judge, &ra, &rb, &refiner, nullptr};

  const auto out_jsonl = dir.path / "out.jsonl";
  const auto audits = dir.path / "audit";
  auto rep = run_pipeline(items, clients, out_jsonl.string(), audits.string());
  CHECK(rep.items == 10);
  CHECK(rep.candidates_generated == 20);
  CHECK(rep.best_selected == 10);
  CHECK(rep.verified == 10);
  CHECK(rep.judged_out == 0);

  const std::string schema = std::string(MOETUNE_SOURCE_DIR) + "/schema/audit_trail.schema.json";
  for (int i = 0; i < 10; ++i) {
    const auto audit = audits / ("it" + std::to_string(i) + ".audit.json");
    REQUIRE(fs::exists(audit));
    CHECK_NOTHROW(validate_audit_trail(audit.string(), schema));
  }
}

TEST_CASE("run_pipeline: judge scoring 5 rejects everything") {
  TempDir dir;
  std::vector<AnnotationItem> items;
  for (int i = 0; i < 10; ++i) items.push_back(item("jo" + std::to_string(i)));
  auto ga = echo_gen("generator-A");
  auto gb = echo_gen("generator-B");
  ScriptedJudge judge([](const ExplanationCandidate&) { return score_all(5); });
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedRefiner refiner([](const ExplanationCandidate& c, const std::string&) { return c.text; });
  PipelineClients clients{{&ga, &gb}, &judge, &ra, &rb, &refiner, nullptr};

  auto rep = run_pipeline(items, clients, (dir.path / "out.jsonl").string(),
                          (dir.path / "audit").string());
  CHECK(rep.judged_out == 10);
  CHECK(rep.verified == 0);
  std::ifstream out(dir.path / "out.jsonl");
  std::string line;
  CHECK_FALSE(std::getline(out, line));
}

TEST_CASE("run_pipeline: resume skips items with terminal audit records") {
  TempDir dir;
  std::vector<AnnotationItem> items{item("r0"), item("r1"), item("r2")};
  auto ga = echo_gen("generator-A");
  auto gb = echo_gen("generator-B");
  int judge_calls = 0;
  ScriptedJudge judge([&judge_calls](const ExplanationCandidate&) {
    ++judge_calls;
    return score_all(8);
  });
  ScriptedReviewer ra("rev-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rb("rev-B", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedRefiner refiner([](const ExplanationCandidate& c, const std::string&) { return c.text; });
  PipelineClients clients{{&ga, &gb}, &judge, &ra, &rb, &refiner, nullptr};

  const auto out_jsonl = dir.path / "out.jsonl";
  const auto audits = dir.path / "audit";
  auto first = run_pipeline(items, clients, out_jsonl.string(), audits.string());
  const int calls_first = judge_calls;

  std::ifstream f1(out_jsonl);
  std::string contents1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());

  auto second = run_pipeline(items, clients, out_jsonl.string(), audits.string());
  CHECK(judge_calls == calls_first);  // nothing re-judged
  CHECK(second.resumed_from_audit == 3);
  CHECK(second.verified == first.verified);

  std::ifstream f2(out_jsonl);
  std::string contents2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(contents1 == contents2);
}

TEST_CASE("filesystem replay generator reads canned responses by item id") {
  TempDir dir;
  {
    std::ofstream f(dir.path / "fx1.generator-A.txt");
    f << "canned explanation";
  }
  FilesystemReplayGenerator gen("generator-A", dir.path.string());
  AnnotationItem it{"fx1", "code", "reentrancy"};
  auto res = generate_explanations(it, {&gen});
  REQUIRE(res.candidates.size() == 1);
  CHECK(res.candidates[0].text == "canned explanation");
  AnnotationItem missing{"fx2", "code", "reentrancy"};
  auto res2 = generate_explanations(missing, {&gen});
  CHECK(res2.candidates.empty());
  CHECK(res2.failures.size() == 1);
}

TEST_CASE("annotation items JSONL round trip") {
  TempDir dir;
  std::vector<AnnotationItem> items{item("a"), item("b", "timestamp")};
  const auto path = dir.path / "items.jsonl";
  write_annotation_items_jsonl(path.string(), items);
  auto back = read_annotation_items_jsonl(path.string());
  REQUIRE(back.size() == 2);
  CHECK(back[1].vulnerability_type == "timestamp");
}
