#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "viloc/rng.hpp"

// Minimal neural substrate with exact analytic gradients, double precision
// throughout. Activations are batch-major (rows = batch items). Each layer
// caches its last forward pass, so backward must follow the matching forward;
// gradients accumulate across passes until zero_grad.

namespace viloc::nn {

using Mat = Eigen::MatrixXd;

struct ParamRef {
    std::string name;
    Mat* value = nullptr;
    Mat* grad = nullptr;
};

inline void zero_grads(const std::vector<ParamRef>& params) {
    for (const auto& p : params) p.grad->setZero();
}

struct BatchTooSmall : std::runtime_error {
    BatchTooSmall() : std::runtime_error("batchnorm needs batch size >= 2 in training mode") {}
};

struct TrainConfig {
    int epochs = 200;
    int batch_size = 32;
    double lr = 1e-3;
    double lr_late = 1e-4;   // used once epoch > lr_drop_epoch
    int lr_drop_epoch = 100; // 1-based epoch after which the lower rate applies
    double dropout_rate = 0.2;
    double leaky_slope = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw std::invalid_argument("dropout rate must be in [0, 1)");
    }
    double lr_for_epoch(int epoch) const { return epoch > lr_drop_epoch ? lr_late : lr; }
};

namespace init {

inline void kaiming_uniform(Mat& w, int fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (int i = 0; i < w.rows(); ++i)
        for (int j = 0; j < w.cols(); ++j) w(i, j) = u(rng);
}

// square orthogonal matrix via QR of a Gaussian draw, sign-fixed to be unique
inline Mat orthogonal(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Mat a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = g(rng);
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ();
    const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

}  // namespace init

class Linear {
  public:
    Linear(std::string name, int in, int out, std::mt19937_64& rng)
        : w_(in, out), b_(1, out), dw_(in, out), db_(1, out), name_(std::move(name)) {
        init::kaiming_uniform(w_, in, rng);
        b_.setZero();
        dw_.setZero();
        db_.setZero();
    }

    Mat forward(const Mat& x) {
        x_ = x;
        return (x * w_).rowwise() + b_.row(0);
    }

    Mat backward(const Mat& dy) {
        dw_ += x_.transpose() * dy;
        db_.row(0) += dy.colwise().sum();
        return dy * w_.transpose();
    }

    std::vector<ParamRef> params() {
        return {{name_ + "/w", &w_, &dw_}, {name_ + "/b", &b_, &db_}};
    }

    Mat w_, b_, dw_, db_;

  private:
    std::string name_;
    Mat x_;
};

class BatchNorm1d {
  public:
    explicit BatchNorm1d(std::string name, int features, double momentum = 0.1,
                         double eps = 1e-5)
        : gamma_(Mat::Ones(1, features)),
          beta_(Mat::Zero(1, features)),
          dgamma_(Mat::Zero(1, features)),
          dbeta_(Mat::Zero(1, features)),
          running_mean_(Mat::Zero(1, features)),
          running_var_(Mat::Ones(1, features)),
          name_(std::move(name)),
          momentum_(momentum),
          eps_(eps) {}

    Mat forward(const Mat& x, bool train) {
        train_ = train;
        const double n = static_cast<double>(x.rows());
        if (train) {
            if (x.rows() < 2) throw BatchTooSmall();
            mean_ = x.colwise().mean();
            const Mat centered = x.rowwise() - mean_.row(0);
            var_ = centered.array().square().colwise().sum().matrix() / n;  // biased
            inv_std_ = (var_.array() + eps_).sqrt().inverse().matrix();
            xhat_ = (centered.array().rowwise() * inv_std_.row(0).array()).matrix();
            // running stats track the unbiased variance, batch norm convention
            running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * mean_;
            running_var_ =
                (1.0 - momentum_) * running_var_ + momentum_ * (var_ * n / (n - 1.0));
        } else {
            inv_std_ = (running_var_.array() + eps_).sqrt().inverse().matrix();
            xhat_ = ((x.rowwise() - running_mean_.row(0)).array().rowwise() *
                     inv_std_.row(0).array())
                        .matrix();
        }
        return (xhat_.array().rowwise() * gamma_.row(0).array()).matrix().rowwise() +
               beta_.row(0);
    }

    Mat backward(const Mat& dy) {
        dgamma_.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
        dbeta_.row(0) += dy.colwise().sum();
        const Mat dxhat = (dy.array().rowwise() * gamma_.row(0).array()).matrix();
        if (!train_)
            return (dxhat.array().rowwise() * inv_std_.row(0).array()).matrix();
        // train mode: gradient flows through the batch mean and variance too
        const double n = static_cast<double>(dy.rows());
        const Mat sum_dxhat = dxhat.colwise().sum();
        const Mat sum_dxhat_xhat = (dxhat.array() * xhat_.array()).colwise().sum().matrix();
        Mat dx = n * dxhat;
        dx.rowwise() -= sum_dxhat.row(0);
        dx -= (xhat_.array().rowwise() * sum_dxhat_xhat.row(0).array()).matrix();
        return ((dx / n).array().rowwise() * inv_std_.row(0).array()).matrix();
    }

    std::vector<ParamRef> params() {
        return {{name_ + "/gamma", &gamma_, &dgamma_}, {name_ + "/beta", &beta_, &dbeta_}};
    }
    std::vector<std::pair<std::string, Mat*>> buffers() {
        return {{name_ + "/running_mean", &running_mean_},
                {name_ + "/running_var", &running_var_}};
    }

    Mat gamma_, beta_, dgamma_, dbeta_, running_mean_, running_var_;

  private:
    std::string name_;
    double momentum_, eps_;
    bool train_ = false;
    Mat mean_, var_, inv_std_, xhat_;
};

class LeakyRelu {
  public:
    explicit LeakyRelu(double slope = 0.2) : slope_(slope) {}

    Mat forward(const Mat& x) {
        const double s = slope_;
        dmask_ = x.unaryExpr([s](double v) { return v > 0.0 ? 1.0 : s; });
        return x.cwiseProduct(dmask_);
    }
    Mat backward(const Mat& dy) { return dy.cwiseProduct(dmask_); }

  private:
    double slope_;
    Mat dmask_;
};

class Dropout {
  public:
    explicit Dropout(double rate = 0.2) : rate_(rate) {}

    Mat forward(const Mat& x, bool train, std::mt19937_64& rng) {
        if (!train || rate_ == 0.0) {
            scale_ = Mat::Ones(x.rows(), x.cols());
            return x;
        }
        std::bernoulli_distribution keep(1.0 - rate_);
        scale_.resize(x.rows(), x.cols());
        const double inv_keep = 1.0 / (1.0 - rate_);
        for (int i = 0; i < x.rows(); ++i)
            for (int j = 0; j < x.cols(); ++j) scale_(i, j) = keep(rng) ? inv_keep : 0.0;
        return x.cwiseProduct(scale_);
    }
    Mat backward(const Mat& dy) { return dy.cwiseProduct(scale_); }

  private:
    double rate_;
    Mat scale_;
};

namespace detail {

// One LSTM direction with full BPTT. The gate layout in all 4h-wide tensors
// is [input, forget, cell, output]. Backward produces parameter gradients
// only: recurrent layers sit at the front of every network here, so no
// gradient w.r.t. inputs is ever needed.
struct LstmDirection {
    Mat wx, wh, b, dwx, dwh, db;
    // caches from the last forward, in processing order
    std::vector<Mat> x, h, c, gi, gf, gg, go;

    void init(int input, int hidden, std::mt19937_64& rng) {
        wx.resize(input, 4 * hidden);
        init::kaiming_uniform(wx, input, rng);
        wh.resize(hidden, 4 * hidden);
        for (int g = 0; g < 4; ++g) wh.middleCols(g * hidden, hidden) = init::orthogonal(hidden, rng);
        b = Mat::Zero(1, 4 * hidden);
        b.middleCols(hidden, hidden).setOnes();  // forget-gate bias 1
        dwx = Mat::Zero(input, 4 * hidden);
        dwh = Mat::Zero(hidden, 4 * hidden);
        db = Mat::Zero(1, 4 * hidden);
    }

    static Mat sigmoid(const Mat& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

    Mat run(const std::vector<Mat>& seq, bool reverse) {
        const int hs = static_cast<int>(wh.rows());
        const int steps = static_cast<int>(seq.size());
        const int batch = static_cast<int>(seq.front().rows());
        x.clear();
        h.clear();
        c.clear();
        gi.clear();
        gf.clear();
        gg.clear();
        go.clear();

        Mat ht = Mat::Zero(batch, hs), ct = Mat::Zero(batch, hs);
        for (int s = 0; s < steps; ++s) {
            const Mat& xt = seq[reverse ? steps - 1 - s : s];
            Mat z = xt * wx + ht * wh;
            z.rowwise() += b.row(0);
            const Mat i = sigmoid(z.middleCols(0, hs));
            const Mat f = sigmoid(z.middleCols(hs, hs));
            const Mat g = z.middleCols(2 * hs, hs).array().tanh();
            const Mat o = sigmoid(z.middleCols(3 * hs, hs));
            x.push_back(xt);
            h.push_back(ht);  // h_{t-1}, the state entering this step
            ct = f.cwiseProduct(ct) + i.cwiseProduct(g);
            ht = o.cwiseProduct(ct.array().tanh().matrix());
            c.push_back(ct);
            gi.push_back(i);
            gf.push_back(f);
            gg.push_back(g);
            go.push_back(o);
        }
        return ht;
    }

    void backprop(const Mat& dy) {
        const int hs = static_cast<int>(wh.rows());
        const int steps = static_cast<int>(x.size());
        const int batch = static_cast<int>(dy.rows());
        Mat dh = dy;
        Mat dc = Mat::Zero(batch, hs);
        for (int s = steps - 1; s >= 0; --s) {
            const Mat tanh_c = c[s].array().tanh();
            const Mat& i = gi[s];
            const Mat& f = gf[s];
            const Mat& g = gg[s];
            const Mat& o = go[s];

            const Mat dco =
                dc + dh.cwiseProduct(o).cwiseProduct((1.0 - tanh_c.array().square()).matrix());
            const Mat c_prev = s == 0 ? Mat(Mat::Zero(batch, hs)) : c[s - 1];

            Mat dz(batch, 4 * hs);
            dz.middleCols(0, hs) =
                dco.cwiseProduct(g).cwiseProduct(i).cwiseProduct((1.0 - i.array()).matrix());
            dz.middleCols(hs, hs) = dco.cwiseProduct(c_prev).cwiseProduct(f).cwiseProduct(
                (1.0 - f.array()).matrix());
            dz.middleCols(2 * hs, hs) =
                dco.cwiseProduct(i).cwiseProduct((1.0 - g.array().square()).matrix());
            dz.middleCols(3 * hs, hs) =
                dh.cwiseProduct(tanh_c).cwiseProduct(o).cwiseProduct((1.0 - o.array()).matrix());

            dwx += x[s].transpose() * dz;
            dwh += h[s].transpose() * dz;
            db.row(0) += dz.colwise().sum();

            dh = dz * wh.transpose();
            dc = dco.cwiseProduct(f);
        }
    }
};

}  // namespace detail

// Bi-directional LSTM over a fixed-length sequence, each direction running
// hidden_size/2 units; output is [forward final hidden | backward final
// hidden].
class BiLstm {
  public:
    BiLstm(std::string name, int input, int hidden, std::mt19937_64& rng)
        : name_(std::move(name)), input_(input), hidden_(hidden), h2_(hidden / 2) {
        if (hidden % 2 != 0) throw std::invalid_argument("bilstm hidden size must be even");
        fwd_.init(input, h2_, rng);
        bwd_.init(input, h2_, rng);
    }

    /// seq: one B x input matrix per timestep. Returns B x hidden.
    Mat forward(const std::vector<Mat>& seq) {
        if (seq.empty()) throw std::invalid_argument("lstm needs at least one timestep");
        const int batch = static_cast<int>(seq.front().rows());
        Mat out(batch, hidden_);
        out.leftCols(h2_) = fwd_.run(seq, /*reverse=*/false);
        out.rightCols(h2_) = bwd_.run(seq, /*reverse=*/true);
        return out;
    }

    /// dy: B x hidden upstream gradient for the concatenated output.
    void backward(const Mat& dy) {
        fwd_.backprop(dy.leftCols(h2_));
        bwd_.backprop(dy.rightCols(h2_));
    }

    std::vector<ParamRef> params() {
        return {{name_ + "/fwd/wx", &fwd_.wx, &fwd_.dwx}, {name_ + "/fwd/wh", &fwd_.wh, &fwd_.dwh},
                {name_ + "/fwd/b", &fwd_.b, &fwd_.db},    {name_ + "/bwd/wx", &bwd_.wx, &bwd_.dwx},
                {name_ + "/bwd/wh", &bwd_.wh, &bwd_.dwh}, {name_ + "/bwd/b", &bwd_.b, &bwd_.db}};
    }

    int input_size() const { return input_; }
    int hidden_size() const { return hidden_; }

    using Direction = detail::LstmDirection;
    Direction fwd_, bwd_;

  private:
    std::string name_;
    int input_, hidden_, h2_;
};

// Single-direction LSTM; output is the final hidden state.
class Lstm {
  public:
    Lstm(std::string name, int input, int hidden, std::mt19937_64& rng)
        : name_(std::move(name)), input_(input), hidden_(hidden) {
        cell_.init(input, hidden, rng);
    }

    Mat forward(const std::vector<Mat>& seq) {
        if (seq.empty()) throw std::invalid_argument("lstm needs at least one timestep");
        return cell_.run(seq, /*reverse=*/false);
    }
    void backward(const Mat& dy) { cell_.backprop(dy); }

    std::vector<ParamRef> params() {
        return {{name_ + "/wx", &cell_.wx, &cell_.dwx},
                {name_ + "/wh", &cell_.wh, &cell_.dwh},
                {name_ + "/b", &cell_.b, &cell_.db}};
    }

    int input_size() const { return input_; }
    int hidden_size() const { return hidden_; }

    detail::LstmDirection cell_;

  private:
    std::string name_;
    int input_, hidden_;
};

class Adam {
  public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    /// One update over the given parameters; the timestep is shared, so call
    /// with the same logical parameter group each time.
    void step(const std::vector<ParamRef>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& p : params) {
            auto& [m, v] = moment_state(p);
            m = beta1_ * m + (1.0 - beta1_) * (*p.grad);
            v = beta2_ * v + (1.0 - beta2_) * p.grad->array().square().matrix();
            p.value->array() -=
                lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
        }
    }

    std::int64_t t_ = 0;
    std::map<std::string, std::pair<Mat, Mat>> moments_;

  private:
    std::pair<Mat, Mat>& moment_state(const ParamRef& p) {
        auto it = moments_.find(p.name);
        if (it == moments_.end())
            it = moments_
                     .emplace(p.name, std::make_pair(Mat::Zero(p.value->rows(), p.value->cols()),
                                                     Mat::Zero(p.value->rows(), p.value->cols())))
                     .first;
        return it->second;
    }

    double lr_, beta1_, beta2_, eps_;
};

struct GradCheckConfig {
    double eps = 1e-5;
    // > 0 limits the finite-difference probe to this many elements per
    // parameter, sampled deterministically; <= 0 probes every element
    int sample_per_param = -1;
    std::uint64_t seed = 12345;
    // relative-error denominator floor: when the analytic and numeric values
    // both sit below this, the comparison is finite-difference roundoff, not
    // signal (e.g. a bias feeding a batchnorm has an exactly-zero gradient)
    double denom_floor = 1e-6;
};

/// Central-difference verification of analytic gradients. `loss` must zero
/// nothing itself: it is called repeatedly and must be a pure function of the
/// current parameter values that accumulates gradients into the refs.
inline double grad_check(const std::function<double()>& loss,
                         const std::vector<ParamRef>& params, GradCheckConfig cfg = {}) {
    zero_grads(params);
    loss();
    std::vector<Mat> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(*p.grad);

    auto rng = make_rng(cfg.seed, "nn/grad_check");
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Mat& value = *params[pi].value;
        const auto total = static_cast<int>(value.size());
        std::vector<int> indices(total);
        std::iota(indices.begin(), indices.end(), 0);
        if (cfg.sample_per_param > 0 && cfg.sample_per_param < total) {
            std::shuffle(indices.begin(), indices.end(), rng);
            indices.resize(cfg.sample_per_param);
        }
        for (int idx : indices) {
            const double saved = value(idx);
            value(idx) = saved + cfg.eps;
            const double up = loss();
            value(idx) = saved - cfg.eps;
            const double down = loss();
            value(idx) = saved;
            const double numeric = (up - down) / (2.0 * cfg.eps);
            const double a = analytic[pi](idx);
            const double rel =
                std::abs(a - numeric) /
                std::max({std::abs(a), std::abs(numeric), cfg.denom_floor});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- checkpoint files ------------------------------------------------------

struct Checkpoint {
    int version = 1;
    std::map<std::string, Mat> tensors;
    std::map<std::string, double> scalars;
    std::map<std::string, std::string> strings;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    using nlohmann::json;
    json j{{"version", ckpt.version}};
    json tensors = json::object();
    for (const auto& [name, m] : ckpt.tensors) {
        json data = json::array();
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
        tensors[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
    }
    j["tensors"] = tensors;
    j["scalars"] = ckpt.scalars;
    j["strings"] = ckpt.strings;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    using nlohmann::json;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    const json j = json::parse(in);
    Checkpoint ckpt;
    ckpt.version = j.at("version");
    if (ckpt.version != 1) throw std::runtime_error("unsupported checkpoint version");
    for (const auto& [name, t] : j.at("tensors").items()) {
        Mat m(static_cast<int>(t.at("rows")), static_cast<int>(t.at("cols")));
        const auto& data = t.at("data");
        int k = 0;
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) m(r, c) = data.at(k++);
        ckpt.tensors.emplace(name, std::move(m));
    }
    ckpt.scalars = j.at("scalars").get<std::map<std::string, double>>();
    ckpt.strings = j.at("strings").get<std::map<std::string, std::string>>();
    return ckpt;
}

}  // namespace viloc::nn
