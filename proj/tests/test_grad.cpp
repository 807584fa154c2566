// Gradient correctness. The oracle is an independent f64 reimplementation
// of the forward pass (plain loops, no shared kernels); finite differences
// through it are compared against the production f32 backward pass.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "reference_model.hpp"
#include "splab/grad.hpp"
#include "splab/model.hpp"
#include "splab/optim.hpp"
#include "splab/rng.hpp"

using namespace splab;

namespace {

using testref::Rows;
using testref::randomize_weights;
using testref::ref_loss;

struct Triple {
    Model model;
    EmbeddingSequence input;
    Rows rows;                    // f64 copy of the input rows
    std::vector<int> prompt_positions;
    std::vector<TargetAt> targets;
};

Triple make_triple(const ModelConfig& cfg, std::uint64_t seed) {
    Triple tr{Model(cfg), {}, {}, {}, {}};
    randomize_weights(tr.model, seed);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);

    const int n_prompt = 3;
    const int n_tokens = 4;
    tr.input.dim = cfg.hidden_dim;
    for (int p = 0; p < n_prompt; ++p) {
        std::vector<float> row(cfg.hidden_dim);
        for (auto& v : row) v = static_cast<float>(rng.gaussian(0.0, 0.4));
        tr.input.append(row.data(), PositionOrigin::ContinuousPrompt);
        tr.prompt_positions.push_back(p);
    }
    for (int t = 0; t < n_tokens; ++t) {
        const TokenId id = static_cast<TokenId>(rng.below(cfg.vocab_size));
        const EmbeddingSequence one = tr.model.embed_tokens(std::vector<TokenId>{id});
        tr.input.append(one);
    }
    const int n = tr.input.length();
    tr.rows.assign(n, std::vector<double>(cfg.hidden_dim));
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < cfg.hidden_dim; ++i) tr.rows[t][i] = tr.input.row(t)[i];

    tr.targets.push_back({n - 1, static_cast<TokenId>(rng.below(cfg.vocab_size))});
    tr.targets.push_back({n - 2, static_cast<TokenId>(rng.below(cfg.vocab_size))});
    return tr;
}

LossFn ce_loss(const std::vector<TargetAt>& targets) {
    return [targets](const std::vector<float>& logits, int rows, int vocab,
                     std::vector<float>& dlogits) {
        return cross_entropy(logits, rows, vocab, targets, dlogits);
    };
}

/// L2-norm relative error between the analytic prompt-row gradient and
/// central differences through the f64 reference.
double input_grad_rel_error(const Triple& tr, double h) {
    const int d = tr.model.cfg.hidden_dim;
    const std::vector<float> analytic =
        grad_wrt_input(tr.model, tr.input, ce_loss(tr.targets), tr.prompt_positions);

    double num = 0.0, den = 0.0;
    Rows rows = tr.rows;
    for (std::size_t pi = 0; pi < tr.prompt_positions.size(); ++pi) {
        const int p = tr.prompt_positions[pi];
        for (int i = 0; i < d; ++i) {
            const double keep = rows[p][i];
            rows[p][i] = keep + h;
            const double up = ref_loss(tr.model, rows, tr.targets);
            rows[p][i] = keep - h;
            const double dn = ref_loss(tr.model, rows, tr.targets);
            rows[p][i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[pi * d + i];
            num += (fd - an) * (fd - an);
            den += fd * fd;
        }
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

// ---------------------------------------------------------------------------
// reference forward vs production forward
// ---------------------------------------------------------------------------

TEST(RefForward, AgreesWithProductionLogits) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 30;
    cfg.max_seq_len = 16;
    const Triple tr = make_triple(cfg, 7);

    ForwardTape tape;
    forward_full(tr.model, tr.input, tape);

    // reference logits via ref_loss probes would hide the comparison; instead
    // recompute the reference loss and the production loss from logits
    std::vector<float> dlogits;
    const double prod_loss =
        cross_entropy(tape.logits, tape.rows, cfg.vocab_size, tr.targets, dlogits);
    const double reference = ref_loss(tr.model, tr.rows, tr.targets);
    EXPECT_NEAR(prod_loss, reference, 1e-4 * (1.0 + std::abs(reference)));
}

// ---------------------------------------------------------------------------
// cross-entropy oracle
// ---------------------------------------------------------------------------

TEST(CrossEntropy, ClosedFormTwoWay) {
    // logits [0, 0]: p = [1/2, 1/2], loss = ln 2, dlogits = [p0 - 1, p1]
    std::vector<float> logits{0.0f, 0.0f};
    std::vector<float> dlogits;
    const double loss = cross_entropy(logits, 1, 2, {{0, 0}}, dlogits);
    EXPECT_NEAR(loss, std::log(2.0), 1e-12);
    EXPECT_NEAR(dlogits[0], -0.5, 1e-7);
    EXPECT_NEAR(dlogits[1], 0.5, 1e-7);
}

TEST(CrossEntropy, UniformRowLossIsLogK) {
    const int K = 7;
    std::vector<float> logits(K, 3.25f);
    std::vector<float> dlogits;
    EXPECT_NEAR(cross_entropy(logits, 1, K, {{0, 4}}, dlogits), std::log(double(K)), 1e-12);
}

TEST(CrossEntropy, ShiftInvariantAndMeanOverTargets) {
    std::vector<float> logits{1.0f, 2.0f, 3.0f, -1.0f, 0.0f, 1.0f};
    std::vector<float> d1, d2;
    const double a = cross_entropy(logits, 2, 3, {{0, 2}}, d1);
    const double b = cross_entropy(logits, 2, 3, {{1, 0}}, d2);
    std::vector<float> dm;
    const double mean = cross_entropy(logits, 2, 3, {{0, 2}, {1, 0}}, dm);
    EXPECT_NEAR(mean, (a + b) / 2.0, 1e-12);

    std::vector<float> shifted{11.0f, 12.0f, 13.0f, -1.0f, 0.0f, 1.0f};
    std::vector<float> ds;
    EXPECT_NEAR(cross_entropy(shifted, 2, 3, {{0, 2}}, ds), a, 1e-6);
}

TEST(CrossEntropy, Validation) {
    std::vector<float> logits{0.0f, 0.0f};
    std::vector<float> d;
    EXPECT_THROW(cross_entropy(logits, 1, 2, {}, d), std::invalid_argument);
    EXPECT_THROW(cross_entropy(logits, 1, 2, {{1, 0}}, d), std::invalid_argument);
    EXPECT_THROW(cross_entropy(logits, 1, 2, {{0, 2}}, d), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// matmul backward hand oracle
// ---------------------------------------------------------------------------

TEST(MatmulBackward, HandExample) {
    // y[t][o] = x[t] . w[o]; dy given, check dx and dw contractions
    const float x[2] = {2, 3};       // 1 row, in=2
    const float w[4] = {1, 2, 3, 4}; // out=2: w0=[1,2], w1=[3,4]
    const float dy[2] = {5, 7};
    float dx[2] = {0, 0};
    float dw[4] = {0, 0, 0, 0};
    detail::matmul_backward(x, w, dy, 1, 2, 2, dx, dw);
    // dx = dy0*w0 + dy1*w1 = 5*[1,2] + 7*[3,4] = [26, 38]
    EXPECT_FLOAT_EQ(dx[0], 26.0f);
    EXPECT_FLOAT_EQ(dx[1], 38.0f);
    // dw[o] = dy[o] * x
    EXPECT_FLOAT_EQ(dw[0], 10.0f);
    EXPECT_FLOAT_EQ(dw[1], 15.0f);
    EXPECT_FLOAT_EQ(dw[2], 14.0f);
    EXPECT_FLOAT_EQ(dw[3], 21.0f);
}

// ---------------------------------------------------------------------------
// finite-difference checks: input gradients
// ---------------------------------------------------------------------------

TEST(InputGrad, FiniteDifferenceSmall) {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 24;
    cfg.vocab_size = 20;
    cfg.max_seq_len = 12;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const Triple tr = make_triple(cfg, seed);
        EXPECT_LT(input_grad_rel_error(tr, 1e-4), 1e-3) << "seed " << seed;
    }
}

TEST(InputGrad, FiniteDifferenceMedium) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 12;
    for (std::uint64_t seed : {11ull, 12ull}) {
        const Triple tr = make_triple(cfg, seed);
        EXPECT_LT(input_grad_rel_error(tr, 1e-4), 1e-3) << "seed " << seed;
    }
}

TEST(InputGrad, LossValueMatchesReference) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.ffn_dim = 48;
    cfg.vocab_size = 24;
    cfg.max_seq_len = 12;
    const Triple tr = make_triple(cfg, 21);
    double loss = 0.0;
    grad_wrt_input(tr.model, tr.input, ce_loss(tr.targets), tr.prompt_positions, &loss);
    EXPECT_NEAR(loss, ref_loss(tr.model, tr.rows, tr.targets), 1e-4 * (1.0 + std::abs(loss)));
}

TEST(InputGrad, RejectsNonPromptPositions) {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 24;
    cfg.vocab_size = 20;
    cfg.max_seq_len = 12;
    const Triple tr = make_triple(cfg, 31);
    // position 3 is a token row
    EXPECT_THROW(grad_wrt_input(tr.model, tr.input, ce_loss(tr.targets), {3}),
                 std::invalid_argument);
    EXPECT_THROW(grad_wrt_input(tr.model, tr.input, ce_loss(tr.targets), {99}),
                 std::invalid_argument);
}

// ---------------------------------------------------------------------------
// finite-difference checks: weight gradients
// ---------------------------------------------------------------------------

namespace {

/// FD check for one weight coordinate using exactly-representable f32
/// perturbations; compares against the production backward's accumulation.
void check_weight_coord(Triple& tr, float* coord, float analytic, double scale_floor) {
    const float keep = *coord;
    const float plus = static_cast<float>(static_cast<double>(keep) + 1e-4);
    const float minus = static_cast<float>(static_cast<double>(keep) - 1e-4);
    *coord = plus;
    const double up = ref_loss(tr.model, tr.rows, tr.targets);
    *coord = minus;
    const double dn = ref_loss(tr.model, tr.rows, tr.targets);
    *coord = keep;
    const double fd = (up - dn) / (static_cast<double>(plus) - minus);
    EXPECT_NEAR(analytic, fd,
                1e-3 * std::max({std::abs(fd), std::abs(double(analytic)), scale_floor}));
}

}  // namespace

TEST(WeightGrad, FiniteDifferenceAcrossAllTensorKinds) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 24;
    cfg.vocab_size = 18;
    cfg.max_seq_len = 12;
    Triple tr = make_triple(cfg, 41);

    ForwardTape tape;
    forward_full(tr.model, tr.input, tape);
    std::vector<float> dlogits;
    cross_entropy(tape.logits, tape.rows, cfg.vocab_size, tr.targets, dlogits);
    WeightGrads wg(tr.model);
    backward(tr.model, tr.input, tape, dlogits, nullptr, &wg);

    // overall gradient scale, for the relative-error floor on tiny coords
    double max_abs = 0.0;
    wg.g.for_each_tensor([&](const std::vector<float>& t) {
        for (float v : t) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    });
    ASSERT_GT(max_abs, 0.0);
    const double floor = 1e-3 * max_abs;

    Model& m = tr.model;
    auto check = [&](float* coord, float analytic) {
        check_weight_coord(tr, coord, analytic, floor);
    };
    // one or two coordinates from every tensor kind
    const TokenId tok = tr.input.tokens[4];
    check(&m.w.token_emb[static_cast<std::size_t>(tok) * 16 + 3],
          wg.g.token_emb[static_cast<std::size_t>(tok) * 16 + 3]);
    check(&m.w.pos_emb[2 * 16 + 5], wg.g.pos_emb[2 * 16 + 5]);
    for (int l = 0; l < 2; ++l) {
        LayerWeights& lw = m.w.layers[l];
        LayerWeights& gw = wg.g.layers[l];
        check(&lw.ln1_gain[1], gw.ln1_gain[1]);
        check(&lw.ln1_bias[2], gw.ln1_bias[2]);
        check(&lw.wq[7], gw.wq[7]);
        check(&lw.wk[19], gw.wk[19]);
        check(&lw.wv[33], gw.wv[33]);
        check(&lw.wo[5], gw.wo[5]);
        check(&lw.ln2_gain[0], gw.ln2_gain[0]);
        check(&lw.ln2_bias[9], gw.ln2_bias[9]);
        check(&lw.fc1_w[11], gw.fc1_w[11]);
        check(&lw.fc1_b[3], gw.fc1_b[3]);
        check(&lw.fc2_w[21], gw.fc2_w[21]);
        check(&lw.fc2_b[8], gw.fc2_b[8]);
    }
    check(&m.w.lnf_gain[4], wg.g.lnf_gain[4]);
    check(&m.w.lnf_bias[6], wg.g.lnf_bias[6]);
    check(&m.w.head_w[13], wg.g.head_w[13]);
}

TEST(WeightGrad, TokenRowWithoutIdThrows) {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_dim = 24;
    cfg.vocab_size = 18;
    cfg.max_seq_len = 12;
    Triple tr = make_triple(cfg, 51);
    tr.input.tokens[4] = -1;  // token-embedded row stripped of its id

    ForwardTape tape;
    forward_full(tr.model, tr.input, tape);
    std::vector<float> dlogits;
    cross_entropy(tape.logits, tape.rows, cfg.vocab_size, tr.targets, dlogits);
    WeightGrads wg(tr.model);
    EXPECT_THROW(backward(tr.model, tr.input, tape, dlogits, nullptr, &wg), std::runtime_error);
}

// ---------------------------------------------------------------------------
// Adam oracle
// ---------------------------------------------------------------------------

TEST(AdamStep, FirstStepClosedForm) {
    // after one step from zero moments: delta = -lr * g / (|g| + eps)
    Adam opt;
    opt.learning_rate = 0.01;
    opt.reset(3);
    std::vector<float> params{1.0f, -2.0f, 0.5f};
    const std::vector<float> grads{0.3f, -0.7f, 0.0f};
    opt.step(params.data(), grads.data(), 3);
    for (int i = 0; i < 3; ++i) {
        const double g = grads[i];
        const double expect =
            static_cast<double>(i == 0 ? 1.0f : (i == 1 ? -2.0f : 0.5f)) -
            0.01 * g / (std::abs(g) + 1e-8);
        EXPECT_NEAR(params[i], expect, 1e-6) << i;
    }
    EXPECT_EQ(opt.t, 1u);
}

TEST(AdamStep, MatchesIndependentF64Loop) {
    Adam opt;
    opt.learning_rate = 2e-3;
    opt.reset(4);
    std::vector<float> params{0.1f, 0.2f, -0.3f, 0.4f};
    std::vector<float> ref_params = params;
    double m[4] = {}, v[4] = {};

    Rng rng(5);
    for (int step = 1; step <= 25; ++step) {
        std::vector<float> g(4);
        for (auto& x : g) x = static_cast<float>(rng.gaussian(0.0, 0.5));
        opt.step(params.data(), g.data(), 4);
        for (int i = 0; i < 4; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * static_cast<double>(g[i]);
            v[i] = 0.999 * v[i] + 0.001 * static_cast<double>(g[i]) * g[i];
            const double mhat = m[i] / (1.0 - std::pow(0.9, step));
            const double vhat = v[i] / (1.0 - std::pow(0.999, step));
            ref_params[i] -= static_cast<float>(2e-3 * mhat / (std::sqrt(vhat) + 1e-8));
        }
        for (int i = 0; i < 4; ++i) ASSERT_EQ(params[i], ref_params[i]) << "step " << step;
    }
}

TEST(AdamStep, SizeMismatchThrows) {
    Adam opt;
    opt.reset(2);
    std::vector<float> p{1.0f};
    std::vector<float> g{1.0f};
    EXPECT_THROW(opt.step(p.data(), g.data(), 1), std::invalid_argument);
}
