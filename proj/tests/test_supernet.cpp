#include <catch2/catch.hpp>

#include <filesystem>
#include <set>

#include "fednas/engine.hpp"
#include "fednas/supernet.hpp"
#include "test_support.hpp"

using namespace fednas;
using testsupport::desk_spec;
using testsupport::tiny_spec;

TEST_CASE("supernet validation enforces the channel doubling rule", "[supernet]") {
  CHECK_NOTHROW(SupernetSpec::cifar10().validate());
  CHECK_NOTHROW(desk_spec().validate());

  SupernetSpec bad = desk_spec();
  bad.stage_channels = {8, 8, 12, 12};  // reduction must double
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = desk_spec();
  bad.reduction_positions = {7};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("master store covers every block and branch", "[supernet]") {
  const SupernetSpec master_spec = SupernetSpec::cifar10();
  Rng rng(3);
  const ParameterStore store = build_master(master_spec, rng);

  // Exactly the canonical enumeration, nothing extra.
  const auto defs = master_param_defs(master_spec);
  CHECK(store.params.size() == defs.size());
  for (const ParamDef& def : defs) {
    REQUIRE(store.params.count(def.path) == 1);
    CHECK(store.params.at(def.path).shape == def.shape);
  }

  // 12 blocks x 4 branches; normal identity branches own no parameters,
  // reduction identity branches own the two pointwise convolutions.
  for (int i = 0; i < master_spec.block_count(); ++i) {
    for (int b = 1; b < kBranchCount; ++b) {
      std::vector<ParamDef> branch;
      append_branch_param_defs(master_spec, i, b, branch);
      CHECK(!branch.empty());
    }
    std::vector<ParamDef> identity;
    append_branch_param_defs(master_spec, i, 0, identity);
    CHECK(identity.size() == (master_spec.is_reduction(i) ? 2u : 0u));
  }
  CHECK(store.params.count("stem/conv.w") == 1);
  CHECK(store.params.count("head/fc.w") == 1);
  CHECK(store.params.count("head/fc.b") == 1);

  // The reference key extracts a path whose block sequence follows the key.
  const ChoiceKey reference = {1, 0, 2, 2, 1, 3, 2, 1, 3, 0, 3, 0};
  SubModel model = extract_submodel(store, reference);
  std::set<std::pair<int, int>> selected;
  for (const ParamRef& p : model.params) {
    if (p.path.rfind("block", 0) != 0) continue;
    const std::size_t slash = p.path.find('/');
    const int block = std::stoi(p.path.substr(5, slash - 5));
    const int branch = std::stoi(p.path.substr(slash + 2, 1));
    CHECK(branch == reference[static_cast<std::size_t>(block)]);
    selected.insert({block, branch});
  }
  // Every block appears except the normal identities at positions 1 and 11;
  // the identity at position 9 is a reduction block and owns parameters.
  CHECK(selected.size() == 10);
  CHECK(selected.count({1, 0}) == 0);
  CHECK(selected.count({11, 0}) == 0);
  CHECK(selected.count({9, 0}) == 1);
}

TEST_CASE("desk master has the expected branch parameter groups", "[supernet]") {
  const SupernetSpec spec = desk_spec();
  Rng rng(1);
  const ParameterStore store = build_master(spec, rng);
  std::set<std::string> groups;
  for (const auto& [path, tensor] : store.params) {
    if (path.rfind("block", 0) == 0) {
      groups.insert(path.substr(0, path.find('/', path.find('/') + 1)));
    }
  }
  // 3 normal blocks x 3 parameterized branches + 1 reduction block x 4.
  CHECK(groups.size() == 13);
}

TEST_CASE("build_master is deterministic under a fixed seed", "[supernet]") {
  Rng a(99), b(99), c(100);
  const ParameterStore sa = build_master(desk_spec(), a);
  const ParameterStore sb = build_master(desk_spec(), b);
  const ParameterStore sc = build_master(desk_spec(), c);
  for (const auto& [path, tensor] : sa.params) {
    CHECK(testsupport::bitwise_equal(tensor, sb.params.at(path)));
  }
  CHECK(!testsupport::bitwise_equal(sa.params.at("stem/conv.w"),
                                    sc.params.at("stem/conv.w")));
}

TEST_CASE("extraction copies master values at call time", "[supernet]") {
  const SupernetSpec spec = desk_spec();
  Rng rng(5);
  ParameterStore store = build_master(spec, rng);

  SECTION("all-identity key contributes no parameters in normal stages") {
    const ChoiceKey key(4, 0);
    SubModel model = extract_submodel(store, key);
    std::set<std::string> paths;
    for (const ParamRef& p : model.params) paths.insert(p.path);
    CHECK(paths == std::set<std::string>{"stem/conv.w", "block2/b0/left.w",
                                         "block2/b0/right.w", "head/fc.w",
                                         "head/fc.b"});
  }

  SECTION("selected branches match the key") {
    const ChoiceKey key = {1, 2, 3, 0};
    SubModel model = extract_submodel(store, key);
    for (const ParamRef& p : model.params) {
      CHECK(testsupport::bitwise_equal(*p.value, store.params.at(p.path)));
      if (p.path.rfind("block", 0) == 0) {
        const int block = p.path[5] - '0';
        const int branch = p.path[8] - '0';
        CHECK(branch == key[static_cast<std::size_t>(block)]);
      }
    }
  }

  SECTION("write-then-read: a later extraction sees master mutations") {
    const ChoiceKey key = {1, 1, 1, 1};
    SubModel before = extract_submodel(store, key);
    store.params.at("block0/b1/conv1.w").data[0] += 0.5;
    SubModel after = extract_submodel(store, key);
    CHECK(after.params.front().path == "stem/conv.w");
    for (const ParamRef& p : after.params) {
      CHECK(testsupport::bitwise_equal(*p.value, store.params.at(p.path)));
    }
    // The earlier extraction is unaffected (copies, not views).
    for (const ParamRef& p : before.params) {
      if (p.path == "block0/b1/conv1.w") {
        CHECK(p.value->data[0] != store.params.at(p.path).data[0]);
      }
    }
  }

  SECTION("key length mismatch is rejected") {
    CHECK_THROWS_AS(extract_submodel(store, ChoiceKey(3, 0)), StructuralError);
  }
}

TEST_CASE("shapes propagate through every branch kind and mode", "[supernet]") {
  const SupernetSpec spec = tiny_spec();
  Rng rng(11);
  const ParameterStore store = build_master(spec, rng);

  // Symbolic walk: normal preserves (C,H,W); reduction doubles C, halves H,W.
  for (int normal = 0; normal < kBranchCount; ++normal) {
    for (int reduction = 0; reduction < kBranchCount; ++reduction) {
      const ChoiceKey key = {static_cast<std::uint8_t>(normal),
                             static_cast<std::uint8_t>(reduction)};
      const auto shapes = forward_shapes(spec, key);
      REQUIRE(shapes.size() == 3);
      CHECK(shapes[0] == ShapeCHW{3, 6, 6});
      CHECK(shapes[1] == ShapeCHW{3, 6, 6});
      CHECK(shapes[2] == ShapeCHW{6, 3, 3});

      // Real forward agrees with the walk all the way to the logits.
      SubModel model = extract_submodel(store, key);
      Batch batch;
      batch.inputs = Tensor({2, 1, 6, 6});
      for (std::size_t i = 0; i < batch.inputs.data.size(); ++i) {
        batch.inputs.data[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
      }
      batch.labels = {0, 2};
      const Tensor logits = forward(model, batch, Mode::eval);
      CHECK(logits.shape == std::vector<int>{2, 3});
    }
  }
}

TEST_CASE("MAC accounting follows the per-layer rules", "[supernet]") {
  SECTION("hand value for a single 3x3 convolution") {
    CHECK(conv_macs(32, 32, 64, 3, 3) == 1769472);
  }

  SECTION("normal identity blocks are free") {
    const SupernetSpec spec = desk_spec();
    CHECK(branch_macs(spec, 0, 0, 8, 8) == 0);
    // Reduction identity: two stride-2 pointwise convolutions.
    CHECK(branch_macs(spec, 2, 0, 8, 8) == 2LL * 4 * 4 * 8 * 8);
  }

  SECTION("all-residual dominates all-identity on the CIFAR-10 master") {
    const SupernetSpec master_spec = SupernetSpec::cifar10();
    CHECK(count_macs(master_spec, ChoiceKey(12, 1)) > count_macs(master_spec, ChoiceKey(12, 0)));
  }

  SECTION("MACs are additive over blocks") {
    const SupernetSpec spec = desk_spec();
    const ChoiceKey key = {2, 1, 3, 2};
    const MacBreakdown detail = count_macs_detail(spec, key);
    for (const int block : {0, 1, 3}) {  // normal positions: identity is free
      ChoiceKey ablated = key;
      ablated[static_cast<std::size_t>(block)] = 0;
      const long long delta = count_macs(spec, key) - count_macs(spec, ablated);
      CHECK(delta == detail.entries[static_cast<std::size_t>(block) + 1].macs);
    }
  }
}

TEST_CASE("ResNet18 baseline MAC count", "[supernet]") {
  const long long total = count_macs_resnet18();
  SECTION("first convolution by hand") {
    const MacBreakdown detail = count_macs_resnet18_detail();
    CHECK(detail.entries.front().name == "conv1");
    CHECK(detail.entries.front().macs == 1769472);
  }
  SECTION("hand-enumerated total") {
    CHECK(total == 555422720);
  }
  SECTION("within 1% of the reported 0.5587G") {
    CHECK(std::abs(static_cast<double>(total) - 0.5587e9) / 0.5587e9 < 0.01);
  }
  SECTION("doubling the input size roughly quadruples the count") {
    const long long doubled = count_macs_resnet18(3, 64, 64);
    CHECK(static_cast<double>(doubled) / static_cast<double>(total) ==
          Approx(4.0).epsilon(1e-3));
    CHECK(doubled == 4 * (total - 5120) + 5120);
  }
}

TEST_CASE("checkpoints round-trip bitwise", "[supernet]") {
  const SupernetSpec spec = desk_spec();
  Rng rng(21);
  ParameterStore store = build_master(spec, rng);
  store.round = 17;
  const std::string dir = testsupport::temp_dir("ckpt");
  const std::string path = dir + "/master.bin";
  save_checkpoint(store, path);
  const ParameterStore loaded = load_checkpoint(spec, path);
  CHECK(loaded.round == 17);
  CHECK(loaded.params.size() == store.params.size());
  for (const auto& [name, tensor] : store.params) {
    CHECK(testsupport::bitwise_equal(tensor, loaded.params.at(name)));
  }
  CHECK_THROWS_AS(load_checkpoint(spec, dir + "/missing.bin"), IoError);
}
