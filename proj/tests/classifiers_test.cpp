#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <numeric>

#include "counsel/classifiers.hpp"

using namespace counsel;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("counsel_aux_" + std::to_string(::getpid()) + "_" + name);
}

// Independent negation stripper: drops "not" and a "do" right before it.
std::pair<std::vector<std::string>, int> strip_negation(const std::string& s) {
    std::vector<std::string> out;
    int neg = 0;
    for (const auto& w : text::split_words(s)) {
        if (w == "not") {
            ++neg;
            if (!out.empty() && out.back() == "do") out.pop_back();
            continue;
        }
        out.push_back(w);
    }
    return {out, neg};
}

std::vector<std::string> flip_person(std::vector<std::string> words) {
    static const std::map<std::string, std::string> m{{"i", "you"}, {"you", "i"}, {"am", "are"},
                                                      {"are", "am"}, {"my", "your"}, {"your", "my"}};
    for (auto& w : words)
        if (m.count(w)) w = m.at(w);
    return words;
}

const NliTraining& trained_nli() {
    static const NliTraining t = train_nli(synth::generate_nli(101, kNliTrainSize), nli_schedule(7));
    return t;
}

const ToxicityTraining& trained_toxicity() {
    static const ToxicityTraining t = train_toxicity(synth::generate_toxicity(101, 1200));
    return t;
}

const EmbedderTraining& trained_embedder() {
    static const EmbedderTraining t = train_embedder(synth::generate_paraphrases(101, 1200));
    return t;
}

}  // namespace

// ------------------------------------------------------------ generators

TEST(SyntheticData, FixedSeedGivesIdenticalCorpora) {
    auto a = synth::generate_nli(5, 200), b = synth::generate_nli(5, 200);
    ASSERT_EQ(a.size(), 200u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].premise, b[i].premise);
        EXPECT_EQ(a[i].hypothesis, b[i].hypothesis);
        EXPECT_EQ(a[i].label, b[i].label);
    }
    auto t1 = synth::generate_toxicity(5, 100), t2 = synth::generate_toxicity(5, 100);
    for (std::size_t i = 0; i < t1.size(); ++i) {
        EXPECT_EQ(t1[i].text, t2[i].text);
        EXPECT_EQ(t1[i].labels, t2[i].labels);
    }
    auto p1 = synth::generate_paraphrases(5, 100), p2 = synth::generate_paraphrases(5, 100);
    for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i].b, p2[i].b);
    auto d1 = synth::generate_dialogue(5, 100), d2 = synth::generate_dialogue(5, 100);
    for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d1[i].response, d2[i].response);
    EXPECT_NE(synth::generate_nli(6, 50)[0].premise + synth::generate_nli(6, 50)[1].premise,
              a[0].premise + a[1].premise);
}

TEST(SyntheticData, ContradictionsDifferByOneNegation) {
    std::size_t seen = 0;
    for (const auto& e : synth::generate_nli(9, 900)) {
        if (e.label != NliLabel::contradiction) continue;
        ++seen;
        auto [p, pn] = strip_negation(e.premise);
        auto [h, hn] = strip_negation(e.hypothesis);
        EXPECT_EQ(std::abs(pn - hn), 1) << e.premise << " | " << e.hypothesis;
        EXPECT_TRUE(p == h || p == flip_person(h)) << e.premise << " | " << e.hypothesis;
    }
    EXPECT_EQ(seen, 300u);
}

TEST(SyntheticData, ClassBalanceWithinFivePercent) {
    for (std::size_t n : {300u, 301u, 1000u}) {
        std::array<std::size_t, 3> nli{};
        for (const auto& e : synth::generate_nli(n, n)) ++nli[static_cast<std::size_t>(e.label)];
        for (auto c : nli) EXPECT_NEAR(double(c) / double(n), 1.0 / 3.0, 0.05);
        std::array<std::size_t, 4> tox{};
        for (const auto& e : synth::generate_toxicity(n, n)) {
            std::size_t k = 0;
            for (std::size_t c = 0; c < 3; ++c)
                if (e.labels[c]) k = c + 1;
            ++tox[k];
        }
        for (auto c : tox) EXPECT_NEAR(double(c) / double(n), 0.25, 0.05);
    }
}

TEST(SyntheticData, ToxicExamplesCarryExactlyTheirLexiconClass) {
    const Lexicon lex = Lexicon::defaults();
    for (const auto& e : synth::generate_toxicity(4, 400)) {
        const auto words = text::split_words(e.text);
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(lex.hits(words, ToxicClass(c)), e.labels[c]) << e.text;
    }
}

TEST(SyntheticData, NeutralPairsSpanTopicsAndRuleOracleAgrees) {
    RuleNli rule;
    for (const auto& e : synth::generate_nli(12, 600))
        EXPECT_EQ(rule.classify(e.premise, e.hypothesis).label, e.label) << e.premise << " | " << e.hypothesis;
}

TEST(SyntheticData, DialogueHasQuestionsAndStatements) {
    std::size_t questions = 0;
    auto pairs = synth::generate_dialogue(3, 200);
    ASSERT_EQ(pairs.size(), 200u);
    for (const auto& p : pairs) {
        EXPECT_FALSE(p.prompt.empty());
        EXPECT_EQ(p.prompt.find('\t'), std::string::npos);
        questions += p.response.back() == '?';
    }
    EXPECT_GT(questions, 60u);
    EXPECT_LT(questions, 180u);
}

TEST(SyntheticData, ZeroSizeRejected) {
    EXPECT_THROW(synth::generate_nli(1, 0), std::invalid_argument);
    EXPECT_THROW(synth::generate_toxicity(1, 0), std::invalid_argument);
    EXPECT_THROW(synth::generate_paraphrases(1, 0), std::invalid_argument);
    EXPECT_THROW(synth::generate_dialogue(1, 0), std::invalid_argument);
}

// ------------------------------------------------------------ NLI

TEST(RuleNli, ReferenceCases) {
    RuleNli nli;
    EXPECT_EQ(nli.classify("i feel sad today", "i feel sad today").label, NliLabel::entailment);
    EXPECT_EQ(nli.classify("i like my job", "i do not like my job").label, NliLabel::contradiction);
    EXPECT_EQ(nli.classify("i like my job", "the weather is cold").label, NliLabel::neutral);
    EXPECT_EQ(nli.classify("i hear you.", "i do not hear you.").label, NliLabel::contradiction);
    EXPECT_EQ(nli.classify("i am not sleeping well", "you are sleeping well.").label, NliLabel::contradiction);
    EXPECT_EQ(nli.classify("i don't like my job", "you like your work").label, NliLabel::contradiction);
}

TEST(TrainedNli, ReferenceCases) {
    const auto& m = trained_nli().model;
    EXPECT_EQ(m.classify("i feel sad today", "i feel sad today").label, NliLabel::entailment);
    EXPECT_EQ(m.classify("i like my job", "i do not like my job").label, NliLabel::contradiction);
    EXPECT_EQ(m.classify("i like my job", "the weather is cold").label, NliLabel::neutral);
}

TEST(TrainedNli, HeldOutAccuracyAtLeastNinetyPercent) {
    const double acc = nli_accuracy(trained_nli().model, synth::generate_nli(202, 900));
    RecordProperty("accuracy", std::to_string(acc));
    EXPECT_GE(acc, 0.90);
}

TEST(TrainedNli, DistributionSumsToOneAndArgmaxIsLabel) {
    const auto& m = trained_nli().model;
    Rng rng(3);
    for (const auto& e : synth::generate_nli(303, 60)) {
        for (auto [p, h] : {std::pair{e.premise, e.hypothesis}, std::pair{e.hypothesis, std::string("zzz qqq")}}) {
            auto r = m.classify(p, h);
            EXPECT_NEAR(r.probs[0] + r.probs[1] + r.probs[2], 1.0, 1e-9);
            auto arg = std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin();
            EXPECT_EQ(static_cast<std::ptrdiff_t>(r.label), arg);
            EXPECT_EQ(m.classify(p, h).probs, r.probs);
        }
    }
}

TEST(TrainedNli, EmptyPairIsUniformNeutral) {
    auto r = trained_nli().model.classify("", "  ");
    EXPECT_EQ(r.label, NliLabel::neutral);
    for (double p : r.probs) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
}

TEST(TrainedNli, UntrainedIsNearChance) {
    FitSchedule s = nli_schedule(1);
    s.epochs = 0;
    auto t = train_nli(synth::generate_nli(1, 300), s);
    EXPECT_TRUE(t.loss_trace.empty());
    EXPECT_NEAR(nli_accuracy(t.model, synth::generate_nli(2, 600)), 1.0 / 3.0, 0.1);
}

TEST(TrainedNli, SingleClassDataRejected) {
    auto data = synth::generate_nli(1, 30);
    for (auto& e : data) e.label = NliLabel::neutral;
    EXPECT_THROW(train_nli(data), std::invalid_argument);
}

TEST(TrainedNli, TrainingIsDeterministic) {
    FitSchedule s;
    s.epochs = 2;
    s.seed = 4;
    auto data = synth::generate_nli(8, 120);
    auto a = train_nli(data, s), b = train_nli(data, s);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
    EXPECT_TRUE(parameters_equal(a.model.params(), b.model.params()));
}

TEST(TrainedNli, CheckpointRoundTrip) {
    const auto& m = trained_nli().model;
    const auto path = temp_path("nli.ckpt");
    m.save(path);
    auto back = TrainedNli::load(path);
    EXPECT_TRUE(parameters_equal(m.params(), back.params()));
    EXPECT_EQ(back.vocab(), m.vocab());
    EXPECT_EQ(back.classify("i am happy", "you are not glad").probs, m.classify("i am happy", "you are not glad").probs);
    EXPECT_THROW(TrainedToxicity::load(path), CheckpointFormatError);
    fs::remove(path);
}

// ------------------------------------------------------------ toxicity

TEST(Toxicity, EmptyTextScoresZero) {
    for (const ToxicityScorer* s : std::initializer_list<const ToxicityScorer*>{&trained_toxicity().model}) {
        auto z = s->score("");
        EXPECT_EQ(z.threat, 0.0);
        EXPECT_EQ(z.insult, 0.0);
        EXPECT_EQ(z.obscene, 0.0);
        EXPECT_EQ(z.overall, 0.0);
    }
    EXPECT_EQ(LexiconToxicity{}.score("").overall, 0.0);
}

TEST(Toxicity, SupportiveSentenceBelowThreshold) {
    EXPECT_LT(trained_toxicity().model.score("thank you for sharing that with me").overall, 0.5);
    EXPECT_EQ(LexiconToxicity{}.score("thank you for sharing that with me").overall, 0.0);
}

TEST(Toxicity, EveryInsultTermFlagged) {
    const auto& m = trained_toxicity().model;
    const Lexicon lexicon = Lexicon::defaults();
    for (const auto& term : lexicon.of(ToxicClass::insult)) {
        const std::string s = "honestly i think you are " + term;
        auto sc = m.score(s);
        EXPECT_GE(sc.insult, 0.5) << s;
        EXPECT_GE(sc.overall, 0.5) << s;
        EXPECT_EQ(LexiconToxicity{}.score(s).insult, 1.0);
    }
}

TEST(Toxicity, OverallIsAlwaysTheMax) {
    const auto& m = trained_toxicity().model;
    for (const auto& e : synth::generate_toxicity(55, 200)) {
        auto s = m.score(e.text);
        EXPECT_EQ(s.overall, std::max({s.threat, s.insult, s.obscene}));
        for (double v : {s.threat, s.insult, s.obscene}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Toxicity, HeldOutPerClassAccuracy) {
    auto acc = toxicity_accuracy(trained_toxicity().model, synth::generate_toxicity(202, 800));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_GE(acc[c], 0.90) << class_name(ToxicClass(c));
}

TEST(Toxicity, SingleClassDataRejected) {
    auto data = synth::generate_toxicity(1, 40);
    for (auto& e : data) e.labels = {false, false, false};
    EXPECT_THROW(train_toxicity(data), std::invalid_argument);
}

TEST(Toxicity, BundledLexiconFilesMatchDefaults) {
    auto l = Lexicon::load_dir(fs::path(COUNSEL_DATA_DIR) / "lexicon");
    EXPECT_EQ(l.terms, Lexicon::defaults().terms);
}

TEST(Toxicity, LexiconMatchesWholeWordsOnly) {
    LexiconToxicity lex;
    EXPECT_EQ(lex.score("that takes real skill").threat, 0.0);
    EXPECT_EQ(lex.score("i will kill you").threat, 1.0);
    EXPECT_EQ(lex.score("they will beat you up").threat, 1.0);
}

TEST(Toxicity, CheckpointRoundTrip) {
    const auto& m = trained_toxicity().model;
    const auto path = temp_path("tox.ckpt");
    m.save(path);
    auto back = TrainedToxicity::load(path);
    EXPECT_TRUE(parameters_equal(m.params(), back.params()));
    EXPECT_EQ(back.score("you idiot").insult, m.score("you idiot").insult);
    fs::remove(path);
}

// ------------------------------------------------------------ embeddings

TEST(Embedding, UnitNormAndDeterministic) {
    const SentenceEmbedder* embedders[] = {&trained_embedder().model, nullptr};
    HashingEmbedder hashing;
    embedders[1] = &hashing;
    for (const SentenceEmbedder* e : embedders) {
        for (const auto& ex : synth::generate_paraphrases(9, 50)) {
            for (const auto& s : {ex.a, ex.b, std::string("qqq zzz ."), std::string("")}) {
                auto v = e->embed(s);
                ASSERT_EQ(v.dim(), e->dim());
                double n = 0.0;
                for (double x : v.values) n += x * x;
                EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
                EXPECT_EQ(e->embed(s), v);
            }
        }
    }
}

TEST(Embedding, EmptyTextUsesReservedVector) {
    EXPECT_EQ(trained_embedder().model.embed(""), reserved_embedding(trained_embedder().model.dim()));
    EXPECT_EQ(HashingEmbedder(16).embed("  "), reserved_embedding(16));
}

TEST(Embedding, ParaphrasesCloserThanRandomPairs) {
    const auto held_out = synth::generate_paraphrases(202, 400);
    auto [p, r] = paraphrase_separation(trained_embedder().model, held_out);
    EXPECT_GT(p, r);
    auto [hp, hr] = paraphrase_separation(HashingEmbedder{}, held_out);
    EXPECT_GT(hp, hr);
}

TEST(Embedding, CheckpointRoundTrip) {
    const auto& m = trained_embedder().model;
    const auto path = temp_path("emb.ckpt");
    m.save(path);
    auto back = TrainedEmbedder::load(path);
    EXPECT_EQ(back.embed("i am sad"), m.embed("i am sad"));
    EXPECT_THROW(TrainedNli::load(path), CheckpointFormatError);
    fs::remove(path);
}

TEST(Cosine, Identities) {
    SentenceEmbedding x{{1, 0, 0}}, y{{0, 1, 0}};
    EXPECT_EQ(cosine_similarity(x, x), 1.0);
    EXPECT_EQ(cosine_similarity(x, y), 0.0);
    EXPECT_THROW(cosine_similarity(x, SentenceEmbedding{{1, 0}}), std::invalid_argument);
    HashingEmbedder h;
    auto v = h.embed("you are not sleeping well");
    EXPECT_NEAR(cosine_similarity(v, v), 1.0, 1e-15);
    EXPECT_LE(cosine_similarity(v, v), 1.0);
}

TEST(Cosine, SymmetricAndBounded) {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        SentenceEmbedding a{std::vector<double>(8)}, b{std::vector<double>(8)};
        for (auto& x : a.values) x = rng.uniform(-1, 1);
        for (auto& x : b.values) x = rng.uniform(-1, 1);
        const double ab = cosine_similarity(a, b);
        EXPECT_EQ(ab, cosine_similarity(b, a));
        EXPECT_GE(ab, -1.0);
        EXPECT_LE(ab, 1.0);
    }
}
