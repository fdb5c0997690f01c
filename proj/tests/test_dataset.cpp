#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "clmk/dataset.hpp"
#include "clmk/synth.hpp"
#include "helpers.hpp"

using namespace clmk;

namespace {

FrameRecord make_record(const std::string& vid, int64_t frame, Label a, Label b, Split split) {
    FrameRecord r;
    r.video_id = vid;
    r.frame_idx = frame;
    r.image_path = "images/" + vid + "_" + std::to_string(frame) + ".ppm";
    r.label_a = a;
    r.label_b = b;
    r.split = split;
    return r;
}

} // namespace

TEST_CASE("manifest load/save") {
    testutil::TempDir dir("manifest");
    const auto path = dir.path() / "m.jsonl";

    SUBCASE("empty file gives empty manifest") {
        std::ofstream(path).close();
        CHECK(load_manifest(path).records.empty());
    }
    SUBCASE("single well-formed line") {
        std::ofstream out(path);
        out << R"({"video_id":"v1","frame_idx":3,"image_path":"a.ppm","label_a":"AO","label_b":"AO","split":"TRAIN"})"
            << "\n";
        out.close();
        const Manifest m = load_manifest(path);
        REQUIRE(m.records.size() == 1);
        CHECK(m.records[0].video_id == "v1");
        CHECK(m.records[0].frame_idx == 3);
        CHECK(m.records[0].label_a == Label::AO);
        CHECK(m.records[0].split == Split::TRAIN);
    }
    SUBCASE("duplicate keys rejected") {
        std::ofstream out(path);
        out << R"({"video_id":"v1","frame_idx":3,"image_path":"a.ppm","label_a":"AO","label_b":"AO","split":"TRAIN"})"
            << "\n"
            << R"({"video_id":"v1","frame_idx":3,"image_path":"b.ppm","label_a":"OTHER","label_b":"OTHER","split":"TRAIN"})"
            << "\n";
        out.close();
        CHECK_THROWS_AS(load_manifest(path), DuplicateFrame);
    }
    SUBCASE("unknown field rejected with line number") {
        std::ofstream out(path);
        out << R"({"video_id":"v1","frame_idx":0,"image_path":"a.ppm","label_a":"AO","label_b":"AO","split":"TRAIN","extra":1})"
            << "\n";
        out.close();
        try {
            load_manifest(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line == 1);
            CHECK(std::string(e.what()).find("extra") != std::string::npos);
        }
    }
    SUBCASE("malformed json names the line") {
        std::ofstream out(path);
        out << R"({"video_id":"v1","frame_idx":0,"image_path":"a.ppm","label_a":"AO","label_b":"AO","split":"TRAIN"})"
            << "\n"
            << "not json\n";
        out.close();
        try {
            load_manifest(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line == 2);
        }
    }
    SUBCASE("round trip preserves records and bytes") {
        Manifest m;
        m.records.push_back(make_record("video a", 0, Label::AO, Label::OTHER, Split::TRAIN));
        m.records.push_back(make_record("video a", 1, Label::ICV_CEC, Label::ICV_CEC, Split::TRAIN));
        m.records.push_back(make_record("snapvid", 0, Label::REC_RF, Label::REC_RF, Split::SNAPSHOT));
        save_manifest(m, path);
        const Manifest back = load_manifest(path);
        CHECK(back.records == m.records);
        const auto path2 = dir.path() / "m2.jsonl";
        save_manifest(back, path2);
        CHECK(testutil::file_checksum(path) == testutil::file_checksum(path2));
    }
}

TEST_CASE("consensus_filter") {
    Manifest m;
    m.records.push_back(make_record("v1", 0, Label::AO, Label::AO, Split::TRAIN));
    m.records.push_back(make_record("v1", 1, Label::AO, Label::OTHER, Split::TRAIN));
    m.records.push_back(make_record("v2", 0, Label::REC_RF, Label::REC_RF, Split::TRAIN));

    const Manifest f = consensus_filter(m);
    REQUIRE(f.records.size() == 2);
    CHECK(f.records[0].frame_idx == 0);
    CHECK(f.records[1].video_id == "v2");

    SUBCASE("idempotent") {
        const Manifest ff = consensus_filter(f);
        CHECK(ff.records == f.records);
    }
    SUBCASE("matches a brute-force filter on random records") {
        Manifest big;
        CounterRng rng(42);
        for (int i = 0; i < 100; ++i) {
            const Label a = label_from_index(static_cast<int>(rng.next_u64() % 4));
            const Label b = label_from_index(static_cast<int>(rng.next_u64() % 4));
            big.records.push_back(make_record("v" + std::to_string(i % 7), i, a, b, Split::TRAIN));
        }
        std::vector<FrameRecord> expect;
        for (const auto& r : big.records)
            if (r.label_a == r.label_b) expect.push_back(r);
        CHECK(consensus_filter(big).records == expect);
    }
}

TEST_CASE("split_by_video") {
    SUBCASE("one video, everything TRAIN") {
        Manifest m;
        for (int i = 0; i < 5; ++i) m.records.push_back(make_record("only", i, Label::AO, Label::AO, Split::TEST));
        const Manifest out = split_by_video(m, {1.0, 0.0, 0.0}, 9);
        for (const auto& r : out.records) CHECK(r.split == Split::TRAIN);
    }
    SUBCASE("10 videos at 0.8/0.1/0.1 give 8/1/1") {
        Manifest m;
        for (int v = 0; v < 10; ++v)
            for (int f = 0; f < 3; ++f)
                m.records.push_back(make_record("v" + std::to_string(v), f, Label::OTHER, Label::OTHER, Split::TRAIN));
        const Manifest out = split_by_video(m, {0.8, 0.1, 0.1}, 4);
        std::map<Split, std::set<std::string>> videos;
        for (const auto& r : out.records) videos[r.split].insert(r.video_id);
        CHECK(videos[Split::TRAIN].size() == 8);
        CHECK(videos[Split::VAL].size() == 1);
        CHECK(videos[Split::TEST].size() == 1);
    }
    SUBCASE("partition property via exhaustive scan") {
        Manifest m;
        for (int v = 0; v < 23; ++v)
            for (int f = 0; f < 4; ++f)
                m.records.push_back(make_record("vid" + std::to_string(v), f, Label::OTHER, Label::OTHER, Split::TRAIN));
        const Manifest out = split_by_video(m, {0.6, 0.2, 0.2}, 17);
        // Every video lands in exactly one split and every video is present.
        std::map<std::string, std::set<Split>> seen;
        for (const auto& r : out.records) seen[r.video_id].insert(r.split);
        CHECK(seen.size() == 23);
        for (const auto& [vid, splits] : seen) CHECK(splits.size() == 1);
    }
    SUBCASE("deterministic given seed") {
        Manifest m;
        for (int v = 0; v < 12; ++v)
            m.records.push_back(make_record("v" + std::to_string(v), 0, Label::OTHER, Label::OTHER, Split::TRAIN));
        const Manifest a = split_by_video(m, {0.5, 0.25, 0.25}, 3);
        const Manifest b = split_by_video(m, {0.5, 0.25, 0.25}, 3);
        CHECK(a.records == b.records);
    }
    SUBCASE("snapshot records pass through untouched") {
        Manifest m;
        m.records.push_back(make_record("snap1", 0, Label::AO, Label::AO, Split::SNAPSHOT));
        for (int v = 0; v < 3; ++v)
            m.records.push_back(make_record("v" + std::to_string(v), 0, Label::OTHER, Label::OTHER, Split::TRAIN));
        const Manifest out = split_by_video(m, {0.4, 0.3, 0.3}, 2);
        CHECK(out.records[0].split == Split::SNAPSHOT);
    }
    SUBCASE("insufficient videos") {
        Manifest m;
        m.records.push_back(make_record("v0", 0, Label::AO, Label::AO, Split::TRAIN));
        CHECK_THROWS_AS(split_by_video(m, {0.4, 0.3, 0.3}, 2), InsufficientVideos);
    }
}

TEST_CASE("class_distribution") {
    SUBCASE("snapshot proportions from 518/132/716/1050") {
        Manifest m;
        const std::array<int, 4> counts = {518, 132, 716, 1050};
        int frame = 0;
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i)
                m.records.push_back(make_record("s", frame++, label_from_index(c), label_from_index(c), Split::SNAPSHOT));
        const auto d = class_distribution(m, Split::SNAPSHOT);
        // Oracle: direct ratios of the constructed counts.
        CHECK(d.proportion[0] == doctest::Approx(518.0 / 2416.0).epsilon(1e-12));
        CHECK(d.proportion[1] == doctest::Approx(132.0 / 2416.0).epsilon(1e-12));
        CHECK(d.proportion[2] == doctest::Approx(716.0 / 2416.0).epsilon(1e-12));
        CHECK(d.proportion[3] == doctest::Approx(1050.0 / 2416.0).epsilon(1e-12));
        // Five-decimal values used elsewhere in the suite.
        CHECK(d.proportion[0] == doctest::Approx(0.21440).epsilon(1e-4));
        CHECK(d.proportion[1] == doctest::Approx(0.05464).epsilon(1e-3));
        CHECK(d.proportion[2] == doctest::Approx(0.29636).epsilon(1e-4));
        CHECK(d.proportion[3] == doctest::Approx(0.43460).epsilon(1e-4));
    }
    SUBCASE("test-set proportions from 776/133/140/1488") {
        Manifest m;
        const std::array<int, 4> counts = {776, 133, 140, 1488};
        int frame = 0;
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i)
                m.records.push_back(make_record("t", frame++, label_from_index(c), label_from_index(c), Split::TEST));
        const auto d = class_distribution(m, Split::TEST);
        CHECK(d.proportion[0] == doctest::Approx(776.0 / 2537.0).epsilon(1e-12));
        CHECK(d.proportion[1] == doctest::Approx(133.0 / 2537.0).epsilon(1e-12));
        CHECK(d.proportion[2] == doctest::Approx(140.0 / 2537.0).epsilon(1e-12));
        CHECK(d.proportion[3] == doctest::Approx(1488.0 / 2537.0).epsilon(1e-12));
        double total = 0.0;
        for (double p : d.proportion) total += p;
        CHECK(std::fabs(total - 1.0) < 1e-9);
    }
    SUBCASE("single record") {
        Manifest m;
        m.records.push_back(make_record("x", 0, Label::AO, Label::AO, Split::VAL));
        const auto d = class_distribution(m, Split::VAL);
        CHECK(d.proportion == std::array<double, 4>{1.0, 0.0, 0.0, 0.0});
    }
    SUBCASE("empty split throws") {
        Manifest m;
        m.records.push_back(make_record("x", 0, Label::AO, Label::AO, Split::VAL));
        CHECK_THROWS_AS(class_distribution(m, Split::TEST), EmptySplit);
    }
}

TEST_CASE("synthetic generator") {
    SUBCASE("zero counts give an empty manifest") {
        testutil::TempDir dir("synth0");
        SynthConfig cfg;
        const Manifest m = generate_synthetic_dataset(cfg, 1, dir.path() / "d");
        CHECK(m.records.empty());
    }
    SUBCASE("same seed twice is byte identical") {
        testutil::TempDir dir("synthdet");
        SynthConfig cfg;
        cfg.train_counts = {3, 3, 3, 6};
        cfg.test_counts = {2, 2, 2, 2};
        cfg.image_size = 32;
        cfg.border_fraction = 0.5;
        generate_synthetic_dataset(cfg, 5, dir.path() / "a");
        generate_synthetic_dataset(cfg, 5, dir.path() / "b");
        CHECK(testutil::tree_checksum(dir.path() / "a") == testutil::tree_checksum(dir.path() / "b"));
    }
    SUBCASE("different seeds differ") {
        testutil::TempDir dir("synthseed");
        SynthConfig cfg;
        cfg.train_counts = {2, 2, 2, 2};
        cfg.image_size = 32;
        generate_synthetic_dataset(cfg, 5, dir.path() / "a");
        generate_synthetic_dataset(cfg, 6, dir.path() / "b");
        CHECK(testutil::tree_checksum(dir.path() / "a") != testutil::tree_checksum(dir.path() / "b"));
    }
    SUBCASE("disagreement rate lands in the 3-sigma binomial band") {
        testutil::TempDir dir("synthdis");
        SynthConfig cfg;
        cfg.train_counts = {0, 0, 0, 1000};
        cfg.image_size = 8;
        cfg.border_px = 1;
        cfg.disagreement_rate = 0.1;
        const Manifest m = generate_synthetic_dataset(cfg, 77, dir.path() / "d");
        int64_t disagree = 0;
        for (const auto& r : m.records)
            if (r.label_a != r.label_b) ++disagree;
        CHECK(disagree >= 70); // 100 - 3*sqrt(1000*0.1*0.9) ~ 71.5
        CHECK(disagree <= 130);
    }
    SUBCASE("rate zero keeps consensus_filter an identity") {
        testutil::TempDir dir("synthcons");
        SynthConfig cfg;
        cfg.train_counts = {4, 4, 4, 4};
        cfg.image_size = 16;
        cfg.border_px = 2;
        const Manifest m = generate_synthetic_dataset(cfg, 9, dir.path() / "d");
        CHECK(consensus_filter(m).records == m.records);
    }
    SUBCASE("images load and respect the pixel range") {
        testutil::TempDir dir("synthload");
        SynthConfig cfg;
        cfg.train_counts = {1, 1, 1, 1};
        cfg.image_size = 32;
        const Manifest m = generate_synthetic_dataset(cfg, 13, dir.path() / "d");
        for (const auto& r : m.records) {
            const Image img = read_ppm(m.resolve(r));
            CHECK(img.width == 32);
            img.validate();
        }
    }
}
