#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "viloc/dataset.hpp"
#include "viloc/nn.hpp"
#include "viloc/rng.hpp"

// Cross-modal localization model: a vision encoder and a phone encoder pulled
// together by an embedding loss, a generator that decodes the phone embedding
// into camera-frame coordinates, and a least-squares GAN discriminator that
// judges (phone, vision, coordinate) triples. Inference reads only the phone
// branch.

namespace viloc::gan {

using Mat = Eigen::MatrixXd;

struct DivergenceDetected : std::runtime_error {
    int epoch;
    explicit DivergenceDetected(int e)
        : std::runtime_error("training loss became non-finite at epoch " + std::to_string(e)),
          epoch(e) {}
};

struct LossReport {
    double l_emb = 0.0;
    double l_d = 0.0;
    double l_g_adv = 0.0;
    double l_reg = 0.0;
    double l_total = 0.0;
};

/// mean over the batch of the Euclidean distance between paired embeddings
inline double embedding_loss(const Mat& e_v, const Mat& e_p) {
    return (e_v - e_p).rowwise().norm().mean();
}

/// mean over the batch of |diff|_1 + |diff|_2 between target and generated coordinates
inline double regularizer(const Mat& c_gnd, const Mat& c_hat) {
    const Mat d = c_gnd - c_hat;
    return (d.cwiseAbs().rowwise().sum() + d.rowwise().norm()).mean();
}

class GanModel {
    // the init stream must be constructed before any layer draws from it,
    // hence this private block precedes every member that consumes it
    double dropout_rate_, leaky_slope_;
    std::uint64_t seed_;
    std::mt19937_64 init_rng_;

  public:
    explicit GanModel(dataset::FeatureMask mask_in = {}, double dropout_rate = 0.2,
                      double leaky_slope = 0.2, std::uint64_t seed = 0)
        : dropout_rate_(dropout_rate),
          leaky_slope_(leaky_slope),
          seed_(seed),
          init_rng_(make_rng(seed, "gan/init")),
          mask(mask_in),
          enc_v("enc_v", 6, 64, init_rng_),
          enc_p("enc_p", mask.width(), 64, init_rng_),
          g_fc1("g/fc1", 64, 64, init_rng_),
          g_bn1("g/bn1", 64),
          g_fc2("g/fc2", 64, 64, init_rng_),
          g_bn2("g/bn2", 64),
          g_fc3("g/fc3", 64, 64, init_rng_),
          g_bn3("g/bn3", 64),
          g_fc4("g/fc4", 64, 32, init_rng_),
          g_bn4("g/bn4", 32),
          g_fc5("g/fc5", 32, 3, init_rng_),
          g_act1(leaky_slope),
          g_act2(leaky_slope),
          g_act3(leaky_slope),
          g_act4(leaky_slope),
          g_do1(dropout_rate),
          g_do2(dropout_rate),
          g_do3(dropout_rate),
          d_lstm_v("d/lstm_v", 6, 8, init_rng_),
          d_lstm_p("d/lstm_p", mask.width(), 8, init_rng_),
          d_fc1("d/fc1", 19, 8, init_rng_),
          d_bn1("d/bn1", 8),
          d_fc2("d/fc2", 8, 4, init_rng_),
          d_bn2("d/bn2", 4),
          d_fc3("d/fc3", 4, 1, init_rng_),
          d_act1(leaky_slope),
          d_act2(leaky_slope),
          v_mean(Mat::Zero(1, 6)),
          v_std(Mat::Ones(1, 6)),
          p_mean(Mat::Zero(1, mask.width())),
          p_std(Mat::Ones(1, mask.width())),
          c_mean(Mat::Zero(1, 3)),
          c_std(Mat::Ones(1, 3)) {}

    // ---- batch assembly (z-scored with the model's stored statistics) -----

    struct Batch {
        std::vector<Mat> v_seq;  // 10 timesteps, each B x 6
        std::vector<Mat> p_seq;  // 10 timesteps, each B x mask width
        Mat c_gnd;               // B x 3
    };

    Batch make_batch(const std::vector<const dataset::Correspondence*>& recs) const {
        Batch b;
        b.p_seq = assemble_phone(recs);
        const auto n = static_cast<int>(recs.size());
        b.v_seq.assign(dataset::kSteps, Mat(n, 6));
        b.c_gnd.resize(n, 3);
        for (int r = 0; r < n; ++r) {
            if (!recs[r]->labeled())
                throw std::logic_error("batch assembly needs labeled correspondences");
            const auto& vm = recs[r]->vision->m;
            for (int t = 0; t < dataset::kSteps; ++t)
                for (int ch = 0; ch < 6; ++ch)
                    b.v_seq[t](r, ch) = (vm(ch, t) - v_mean(0, ch)) / v_std(0, ch);
            for (int ch = 0; ch < 3; ++ch)
                b.c_gnd(r, ch) = ((*recs[r]->c_gnd)(ch) - c_mean(0, ch)) / c_std(0, ch);
        }
        return b;
    }

    std::vector<Mat> assemble_phone(const std::vector<const dataset::Correspondence*>& recs) const {
        const auto n = static_cast<int>(recs.size());
        const int width = mask.width();
        std::vector<Mat> seq(dataset::kSteps, Mat(n, width));
        for (int r = 0; r < n; ++r) {
            const Eigen::MatrixXd masked = dataset::apply_mask(recs[r]->phone, mask);
            for (int t = 0; t < dataset::kSteps; ++t)
                for (int ch = 0; ch < width; ++ch)
                    seq[t](r, ch) = (masked(ch, t) - p_mean(0, ch)) / p_std(0, ch);
        }
        return seq;
    }

    /// per-channel mean/std over the given records for vision, phone and
    /// coordinate channels; constant channels get their std floored so the
    /// z-score stays bounded
    void fit_normalization(const std::vector<const dataset::Correspondence*>& recs) {
        const auto fit = [](const Mat& rows) {
            Mat mean = rows.colwise().mean();
            const Mat var =
                (rows.rowwise() - mean.row(0)).array().square().colwise().mean().matrix();
            Mat std = var.array().sqrt().max(1e-6).matrix();
            for (int ch = 0; ch < rows.cols(); ++ch) {
                // constant channels must normalize to exactly zero; the mean
                // rounding of colwise().mean() divided by the std floor would
                // otherwise leave ~1e-10 garbage in the channel
                if (std::sqrt(var(0, ch)) < 1e-9) {
                    mean(0, ch) = rows(0, ch);
                    std(0, ch) = 1.0;
                }
            }
            return std::make_pair(mean, std);
        };

        Mat v_rows(static_cast<int>(recs.size()) * dataset::kSteps, 6);
        Mat p_rows(static_cast<int>(recs.size()) * dataset::kSteps, mask.width());
        Mat c_rows(static_cast<int>(recs.size()), 3);
        for (std::size_t r = 0; r < recs.size(); ++r) {
            if (!recs[r]->labeled())
                throw std::logic_error("normalization fit needs labeled correspondences");
            const Eigen::MatrixXd masked = dataset::apply_mask(recs[r]->phone, mask);
            for (int t = 0; t < dataset::kSteps; ++t) {
                const int row = static_cast<int>(r) * dataset::kSteps + t;
                v_rows.row(row) = recs[r]->vision->m.col(t).transpose();
                p_rows.row(row) = masked.col(t).transpose();
            }
            c_rows.row(static_cast<int>(r)) = recs[r]->c_gnd->transpose();
        }
        std::tie(v_mean, v_std) = fit(v_rows);
        std::tie(p_mean, p_std) = fit(p_rows);
        std::tie(c_mean, c_std) = fit(c_rows);
    }

    // ---- network forward/backward blocks ----------------------------------

    Mat encode_v(const std::vector<Mat>& v_seq) { return enc_v.forward(v_seq); }
    Mat encode_p(const std::vector<Mat>& p_seq) { return enc_p.forward(p_seq); }

    Mat gen_forward(const Mat& e_p, bool train, std::mt19937_64* rng) {
        if (train && rng == nullptr)
            throw std::logic_error("training-mode generator forward needs a dropout stream");
        std::mt19937_64 unused(0);
        std::mt19937_64& r = rng != nullptr ? *rng : unused;
        Mat h = g_do1.forward(g_act1.forward(g_bn1.forward(g_fc1.forward(e_p), train)), train, r);
        h = g_do2.forward(g_act2.forward(g_bn2.forward(g_fc2.forward(h), train)), train, r);
        h = g_do3.forward(g_act3.forward(g_bn3.forward(g_fc3.forward(h), train)), train, r);
        h = g_act4.forward(g_bn4.forward(g_fc4.forward(h), train));
        return g_fc5.forward(h);
    }

    /// returns the gradient w.r.t. the phone embedding
    Mat gen_backward(const Mat& dc_hat) {
        Mat d = g_fc5.backward(dc_hat);
        d = g_fc4.backward(g_bn4.backward(g_act4.backward(d)));
        d = g_fc3.backward(g_bn3.backward(g_act3.backward(g_do3.backward(d))));
        d = g_fc2.backward(g_bn2.backward(g_act2.backward(g_do2.backward(d))));
        return g_fc1.backward(g_bn1.backward(g_act1.backward(g_do1.backward(d))));
    }

    Mat disc_forward(const std::vector<Mat>& v_seq, const std::vector<Mat>& p_seq, const Mat& c,
                     bool train) {
        const Mat h_v = d_lstm_v.forward(v_seq);
        const Mat h_p = d_lstm_p.forward(p_seq);
        Mat in(c.rows(), 19);
        in.leftCols(8) = h_v;
        in.middleCols(8, 8) = h_p;
        in.rightCols(3) = c;
        Mat h = d_act1.forward(d_bn1.forward(d_fc1.forward(in), train));
        h = d_act2.forward(d_bn2.forward(d_fc2.forward(h), train));
        return d_fc3.forward(h);  // raw score, least-squares targets need no squashing
    }

    /// returns the gradient w.r.t. the coordinate slots of the input triple
    Mat disc_backward(const Mat& dscore) {
        Mat d = d_fc2.backward(d_bn2.backward(d_act2.backward(d_fc3.backward(dscore))));
        const Mat din = d_fc1.backward(d_bn1.backward(d_act1.backward(d)));
        d_lstm_v.backward(din.leftCols(8));
        d_lstm_p.backward(din.middleCols(8, 8));
        return din.rightCols(3);
    }

    // ---- adversarial steps -------------------------------------------------

    struct BatchForward {
        Mat e_v, e_p, c_hat;
    };

    /// one generator-side forward per batch; both steps below reuse c_hat
    BatchForward forward_generator(const Batch& b, bool train, std::mt19937_64* rng) {
        BatchForward f;
        f.e_v = enc_v.forward(b.v_seq);
        f.e_p = enc_p.forward(b.p_seq);
        f.c_hat = gen_forward(f.e_p, train, rng);
        return f;
    }

    /// d_loss forward+backward; generator outputs are treated as constants
    double discriminator_backprop(const Batch& b, const Mat& c_hat, bool train) {
        const double n = static_cast<double>(c_hat.rows());
        const Mat s_real = disc_forward(b.v_seq, b.p_seq, b.c_gnd, train);
        disc_backward(2.0 * (s_real.array() - 1.0).matrix() / n);
        const Mat s_fake = disc_forward(b.v_seq, b.p_seq, c_hat, train);
        disc_backward(2.0 * s_fake / n);
        return (s_real.array() - 1.0).square().mean() + s_fake.array().square().mean();
    }

    double discriminator_step(const Batch& b, const Mat& c_hat) {
        auto dp = disc_params();
        nn::zero_grads(dp);
        const double d_loss = discriminator_backprop(b, c_hat, true);
        opt_d.step(dp);
        return d_loss;
    }

    /// embedding + adversarial + reconstruction losses, gradients into the
    /// encoder/generator parameters; discriminator parameters are read-only
    /// here (their gradient buffers collect dead values, discarded at the next
    /// discriminator step)
    std::tuple<double, double, double> generator_backprop(const Batch& b, const BatchForward& f,
                                                          bool disc_train) {
        const double n = static_cast<double>(f.c_hat.rows());

        const Mat s = disc_forward(b.v_seq, b.p_seq, f.c_hat, disc_train);
        Mat dc_hat = disc_backward(2.0 * (s.array() - 1.0).matrix() / n);
        const double g_adv = (s.array() - 1.0).square().mean();

        const Mat diff = b.c_gnd - f.c_hat;
        const double reg = (diff.cwiseAbs().rowwise().sum() + diff.rowwise().norm()).mean();
        for (int r = 0; r < diff.rows(); ++r) {
            const double norm = diff.row(r).norm();
            for (int j = 0; j < 3; ++j) {
                const double sign = diff(r, j) > 0.0 ? 1.0 : (diff(r, j) < 0.0 ? -1.0 : 0.0);
                const double unit = norm > 1e-12 ? diff(r, j) / norm : 0.0;
                dc_hat(r, j) += -(sign + unit) / n;
            }
        }

        const Mat ediff = f.e_v - f.e_p;
        const double l_emb = ediff.rowwise().norm().mean();
        Mat de_v = Mat::Zero(ediff.rows(), ediff.cols());
        for (int r = 0; r < ediff.rows(); ++r) {
            const double norm = ediff.row(r).norm();
            if (norm > 1e-12) de_v.row(r) = ediff.row(r) / (norm * n);
        }

        const Mat de_p = gen_backward(dc_hat) - de_v;
        enc_p.backward(de_p);
        enc_v.backward(de_v);
        return {l_emb, g_adv, reg};
    }

    std::tuple<double, double, double> generator_step(const Batch& b, const BatchForward& f) {
        auto gp = gen_params();
        nn::zero_grads(gp);
        const auto losses = generator_backprop(b, f, true);
        opt_g.step(gp);
        return losses;
    }

    // ---- single-record operations (eval mode) ------------------------------

    std::pair<Eigen::VectorXd, Eigen::VectorXd> embed(const dataset::VisionWindow& v,
                                                      const dataset::PhoneWindow& p) {
        std::vector<Mat> v_seq(dataset::kSteps, Mat(1, 6));
        for (int t = 0; t < dataset::kSteps; ++t)
            for (int ch = 0; ch < 6; ++ch)
                v_seq[t](0, ch) = (v.m(ch, t) - v_mean(0, ch)) / v_std(0, ch);
        const Mat e_v = enc_v.forward(v_seq);
        const Mat e_p = enc_p.forward(phone_seq(p));
        return {e_v.row(0).transpose(), e_p.row(0).transpose()};
    }

    Eigen::Vector3d generate(const Eigen::VectorXd& e_p) {
        const Mat c = gen_forward(e_p.transpose(), false, nullptr);
        return c.row(0).transpose();
    }

    double discriminate(const dataset::VisionWindow& v, const dataset::PhoneWindow& p,
                        const Eigen::Vector3d& c) {
        std::vector<Mat> v_seq(dataset::kSteps, Mat(1, 6));
        for (int t = 0; t < dataset::kSteps; ++t)
            for (int ch = 0; ch < 6; ++ch)
                v_seq[t](0, ch) = (v.m(ch, t) - v_mean(0, ch)) / v_std(0, ch);
        Mat cz(1, 3);
        for (int j = 0; j < 3; ++j) cz(0, j) = (c(j) - c_mean(0, j)) / c_std(0, j);
        return disc_forward(v_seq, phone_seq(p), cz, false)(0, 0);
    }

    /// phone-only localization; never reads vision input or the discriminator
    Eigen::Vector3d infer(const dataset::PhoneWindow& p) {
        const Mat e_p = enc_p.forward(phone_seq(p));
        const Mat c = gen_forward(e_p, false, nullptr);
        Eigen::Vector3d out;
        for (int j = 0; j < 3; ++j) out(j) = c(0, j) * c_std(0, j) + c_mean(0, j);
        return out;
    }

    // ---- parameter registries ----------------------------------------------

    std::vector<nn::ParamRef> gen_params() {
        std::vector<nn::ParamRef> out;
        const auto add = [&out](std::vector<nn::ParamRef> ps) {
            out.insert(out.end(), ps.begin(), ps.end());
        };
        add(enc_v.params());
        add(enc_p.params());
        add(g_fc1.params());
        add(g_bn1.params());
        add(g_fc2.params());
        add(g_bn2.params());
        add(g_fc3.params());
        add(g_bn3.params());
        add(g_fc4.params());
        add(g_bn4.params());
        add(g_fc5.params());
        return out;
    }

    std::vector<nn::ParamRef> disc_params() {
        std::vector<nn::ParamRef> out;
        const auto add = [&out](std::vector<nn::ParamRef> ps) {
            out.insert(out.end(), ps.begin(), ps.end());
        };
        add(d_lstm_v.params());
        add(d_lstm_p.params());
        add(d_fc1.params());
        add(d_bn1.params());
        add(d_fc2.params());
        add(d_bn2.params());
        add(d_fc3.params());
        return out;
    }

    std::vector<nn::ParamRef> all_params() {
        auto out = gen_params();
        auto d = disc_params();
        out.insert(out.end(), d.begin(), d.end());
        return out;
    }

    std::vector<std::pair<std::string, Mat*>> buffers() {
        std::vector<std::pair<std::string, Mat*>> out;
        for (auto* bn : {&g_bn1, &g_bn2, &g_bn3, &g_bn4, &d_bn1, &d_bn2})
            for (auto& b : bn->buffers()) out.push_back(b);
        out.emplace_back("norm/v_mean", &v_mean);
        out.emplace_back("norm/v_std", &v_std);
        out.emplace_back("norm/p_mean", &p_mean);
        out.emplace_back("norm/p_std", &p_std);
        out.emplace_back("norm/c_mean", &c_mean);
        out.emplace_back("norm/c_std", &c_std);
        return out;
    }

    // ---- checkpointing -----------------------------------------------------

    nn::Checkpoint to_checkpoint() {
        nn::Checkpoint ckpt;
        for (const auto& p : all_params()) ckpt.tensors[p.name] = *p.value;
        for (const auto& [name, value] : buffers()) ckpt.tensors[name] = *value;
        const auto dump_adam = [&ckpt](const std::string& prefix, const nn::Adam& opt) {
            ckpt.scalars[prefix + "/t"] = static_cast<double>(opt.t_);
            for (const auto& [name, mv] : opt.moments_) {
                ckpt.tensors[prefix + "/m/" + name] = mv.first;
                ckpt.tensors[prefix + "/v/" + name] = mv.second;
            }
        };
        dump_adam("adam_g", opt_g);
        dump_adam("adam_d", opt_d);
        ckpt.scalars["dropout_rate"] = dropout_rate_;
        ckpt.scalars["leaky_slope"] = leaky_slope_;
        ckpt.scalars["mask/ftm"] = mask.ftm ? 1.0 : 0.0;
        ckpt.scalars["mask/imu"] = mask.imu ? 1.0 : 0.0;
        ckpt.scalars["mask/gps"] = mask.gps ? 1.0 : 0.0;
        ckpt.scalars["mask/rssi"] = mask.rssi ? 1.0 : 0.0;
        ckpt.strings["seed"] = std::to_string(seed_);
        ckpt.strings["model"] = "viloc-gan";
        return ckpt;
    }

    static GanModel from_checkpoint(const nn::Checkpoint& ckpt) {
        dataset::FeatureMask mask;
        mask.ftm = ckpt.scalars.at("mask/ftm") != 0.0;
        mask.imu = ckpt.scalars.at("mask/imu") != 0.0;
        mask.gps = ckpt.scalars.at("mask/gps") != 0.0;
        mask.rssi = ckpt.scalars.at("mask/rssi") != 0.0;
        GanModel model(mask, ckpt.scalars.at("dropout_rate"), ckpt.scalars.at("leaky_slope"),
                       std::stoull(ckpt.strings.at("seed")));
        for (const auto& p : model.all_params()) *p.value = ckpt.tensors.at(p.name);
        for (const auto& [name, value] : model.buffers()) *value = ckpt.tensors.at(name);
        const auto load_adam = [&ckpt, &model](const std::string& prefix, nn::Adam& opt) {
            opt.t_ = static_cast<std::int64_t>(ckpt.scalars.at(prefix + "/t"));
            opt.moments_.clear();
            for (const auto& p : model.all_params()) {
                const auto mi = ckpt.tensors.find(prefix + "/m/" + p.name);
                const auto vi = ckpt.tensors.find(prefix + "/v/" + p.name);
                if (mi != ckpt.tensors.end() && vi != ckpt.tensors.end())
                    opt.moments_.emplace(p.name, std::make_pair(mi->second, vi->second));
            }
        };
        load_adam("adam_g", model.opt_g);
        load_adam("adam_d", model.opt_d);
        return model;
    }

    void save(const std::filesystem::path& path) { nn::save_checkpoint(to_checkpoint(), path); }
    static GanModel load(const std::filesystem::path& path) {
        return from_checkpoint(nn::load_checkpoint(path));
    }

    double dropout_rate() const { return dropout_rate_; }
    double leaky_slope() const { return leaky_slope_; }
    std::uint64_t seed() const { return seed_; }

    dataset::FeatureMask mask;  // declared before the encoders that size off it

    nn::BiLstm enc_v, enc_p;
    nn::Linear g_fc1;
    nn::BatchNorm1d g_bn1;
    nn::Linear g_fc2;
    nn::BatchNorm1d g_bn2;
    nn::Linear g_fc3;
    nn::BatchNorm1d g_bn3;
    nn::Linear g_fc4;
    nn::BatchNorm1d g_bn4;
    nn::Linear g_fc5;
    nn::LeakyRelu g_act1, g_act2, g_act3, g_act4;
    nn::Dropout g_do1, g_do2, g_do3;

    nn::Lstm d_lstm_v, d_lstm_p;
    nn::Linear d_fc1;
    nn::BatchNorm1d d_bn1;
    nn::Linear d_fc2;
    nn::BatchNorm1d d_bn2;
    nn::Linear d_fc3;
    nn::LeakyRelu d_act1, d_act2;

    Mat v_mean, v_std, p_mean, p_std, c_mean, c_std;
    nn::Adam opt_g, opt_d;

  private:
    std::vector<Mat> phone_seq(const dataset::PhoneWindow& p) const {
        const Eigen::MatrixXd masked = dataset::apply_mask(p, mask);
        std::vector<Mat> seq(dataset::kSteps, Mat(1, mask.width()));
        for (int t = 0; t < dataset::kSteps; ++t)
            for (int ch = 0; ch < mask.width(); ++ch)
                seq[t](0, ch) = (masked(ch, t) - p_mean(0, ch)) / p_std(0, ch);
        return seq;
    }
};

/// the two least-squares objectives evaluated on a batch in eval mode
inline std::pair<double, double> lsgan_losses(GanModel& model, const GanModel::Batch& batch) {
    const Mat e_p = model.encode_p(batch.p_seq);
    const Mat c_hat = model.gen_forward(e_p, false, nullptr);
    const Mat s_real = model.disc_forward(batch.v_seq, batch.p_seq, batch.c_gnd, false);
    const Mat s_fake = model.disc_forward(batch.v_seq, batch.p_seq, c_hat, false);
    const double d_loss =
        (s_real.array() - 1.0).square().mean() + s_fake.array().square().mean();
    const double g_adv = (s_fake.array() - 1.0).square().mean();
    return {d_loss, g_adv};
}

/// adversarial training: per batch one discriminator step on d_loss, then one
/// generator/encoder step on l_emb + g_adv + regularizer. Returns one loss
/// report per epoch with batch-averaged components.
inline std::vector<LossReport> train(GanModel& model, const dataset::Dataset& data,
                                     const nn::TrainConfig& cfg) {
    cfg.validate();
    std::vector<const dataset::Correspondence*> recs;
    for (const auto& r : data)
        if (r.labeled()) recs.push_back(&r);
    if (recs.empty()) throw std::invalid_argument("training needs labeled correspondences");
    if (cfg.epochs == 0) return {};

    model.fit_normalization(recs);
    model.opt_g = nn::Adam(cfg.lr);
    model.opt_d = nn::Adam(cfg.lr);

    auto shuffle_rng = make_rng(cfg.seed, "gan/shuffle");
    auto dropout_rng = make_rng(cfg.seed, "gan/dropout");

    std::vector<std::size_t> order(recs.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<LossReport> history;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = cfg.lr_for_epoch(epoch);
        model.opt_g.set_lr(lr);
        model.opt_d.set_lr(lr);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        LossReport ep;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            if (stop - start < 2) continue;  // batchnorm cannot run on one row
            std::vector<const dataset::Correspondence*> chunk;
            for (std::size_t i = start; i < stop; ++i) chunk.push_back(recs[order[i]]);

            const auto batch = model.make_batch(chunk);
            const auto fwd = model.forward_generator(batch, true, &dropout_rng);
            const double d_loss = model.discriminator_step(batch, fwd.c_hat);
            const auto [l_emb, g_adv, l_reg] = model.generator_step(batch, fwd);

            if (!std::isfinite(d_loss) || !std::isfinite(l_emb) || !std::isfinite(g_adv) ||
                !std::isfinite(l_reg))
                throw DivergenceDetected(epoch);

            ep.l_emb += l_emb;
            ep.l_d += d_loss;
            ep.l_g_adv += g_adv;
            ep.l_reg += l_reg;
            ++batches;
        }
        if (batches == 0)
            throw std::invalid_argument("dataset has too few labeled records for one batch");
        ep.l_emb /= batches;
        ep.l_d /= batches;
        ep.l_g_adv /= batches;
        ep.l_reg /= batches;
        ep.l_total = ep.l_emb + ep.l_g_adv + ep.l_reg;
        history.push_back(ep);
    }
    return history;
}

inline void write_loss_csv(const std::vector<LossReport>& history,
                           const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write loss log " + path.string());
    out << "epoch,l_emb,l_d,l_g_adv,l_reg\n";
    out.precision(17);
    for (std::size_t i = 0; i < history.size(); ++i)
        out << i + 1 << ',' << history[i].l_emb << ',' << history[i].l_d << ','
            << history[i].l_g_adv << ',' << history[i].l_reg << '\n';
}

}  // namespace viloc::gan
