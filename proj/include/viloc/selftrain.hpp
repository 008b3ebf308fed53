#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "viloc/dataset.hpp"
#include "viloc/gan.hpp"
#include "viloc/nn.hpp"

// Self-learning loop: localize unlabeled phones with the generator, snap each
// to the nearest camera detection, mint the pair as a new correspondence, and
// fine-tune on the expanded set.

namespace viloc::selftrain {

using Vec3 = Eigen::Vector3d;

struct NoCameraDetections : std::runtime_error {
    NoCameraDetections()
        : std::runtime_error("no camera detections available for association") {}
};

struct AssociationResult {
    int phone_id = 0;
    int matched_camera_id = 0;
    double distance = 0.0;
    std::optional<bool> is_correct;  // known only when identities are ground truth
};

/// nearest camera detection per phone, independently per phone (matches are
/// not exclusive); ties go to the lowest camera index
inline std::vector<AssociationResult> associate(const std::vector<Vec3>& phone,
                                                const std::vector<Vec3>& camera) {
    if (camera.empty())
        throw std::invalid_argument("association needs at least one camera detection");
    std::vector<AssociationResult> out;
    out.reserve(phone.size());
    for (std::size_t i = 0; i < phone.size(); ++i) {
        int best = 0;
        double best_d = (phone[i] - camera[0]).norm();
        for (std::size_t j = 1; j < camera.size(); ++j) {
            const double d = (phone[i] - camera[j]).norm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(j);
            }
        }
        out.push_back({static_cast<int>(i), best, best_d, std::nullopt});
    }
    return out;
}

/// stamps is_correct by comparing ground-truth identities on both sides
inline void mark_correct(std::vector<AssociationResult>& results,
                         const std::vector<int>& phone_ids,
                         const std::vector<int>& camera_ids) {
    for (auto& r : results)
        r.is_correct = camera_ids.at(static_cast<std::size_t>(r.matched_camera_id)) ==
                       phone_ids.at(static_cast<std::size_t>(r.phone_id));
}

inline double association_precision(const std::vector<AssociationResult>& results) {
    int total = 0, correct = 0;
    for (const auto& r : results) {
        if (!r.is_correct.has_value()) continue;
        ++total;
        if (*r.is_correct) ++correct;
    }
    if (total == 0)
        throw std::invalid_argument("precision needs results with ground-truth flags");
    return static_cast<double>(correct) / total;
}

/// one association turned into training material: the phone window plus the
/// matched camera window and its 3D coordinate as the target
struct MintCandidate {
    std::string scene;
    int ped = 0;  // phone-side identity, kept for bookkeeping
    double t0 = 0.0;
    dataset::PhoneWindow phone;
    dataset::VisionWindow vision;
    Vec3 c_cam = Vec3::Zero();
};

/// labeled records pass through untouched; each candidate appends a record
/// carrying the minted provenance flag
inline dataset::Dataset expand_dataset(const dataset::Dataset& labeled,
                                       const std::vector<MintCandidate>& minted) {
    dataset::Dataset out = labeled;
    out.reserve(labeled.size() + minted.size());
    for (const auto& m : minted) {
        dataset::Correspondence rec;
        rec.scene = m.scene;
        rec.ped = m.ped;
        rec.t0 = m.t0;
        rec.vision = m.vision;
        rec.phone = m.phone;
        rec.c_gnd = m.c_cam;
        rec.minted = true;
        out.push_back(std::move(rec));
    }
    return out;
}

struct SelfTrainConfig {
    int finetune_epochs = 50;
    int batch_size = 32;
    double finetune_lr = 1e-4;
    // optional gate for precision studies; infinity reproduces the pure-argmin rule
    double max_match_distance = std::numeric_limits<double>::infinity();
    std::uint64_t seed = 0;
    int iteration = 0;  // stamped into the report
};

struct SelfTrainReport {
    int iteration = 0;
    double precision = 0.0;
    int minted_count = 0;
    double pre_error = 0.0;
    double post_error = 0.0;
};

inline double mean_infer_error(gan::GanModel& model, const dataset::Dataset& holdout) {
    double acc = 0.0;
    int n = 0;
    for (const auto& r : holdout) {
        if (!r.labeled()) continue;
        acc += (model.infer(r.phone) - *r.c_gnd).norm();
        ++n;
    }
    if (n == 0) throw std::invalid_argument("held-out evaluation needs labeled records");
    return acc / n;
}

/// infer → associate per (scene, t0) → mint → fine-tune at the low rate.
/// Unlabeled records contribute their phone windows as query identities; the
/// ones that also carry vision act as the camera detections of their window.
inline SelfTrainReport selftrain_iteration(gan::GanModel& model,
                                           const dataset::Dataset& labeled,
                                           const dataset::Dataset& unlabeled,
                                           const dataset::Dataset& holdout,
                                           const SelfTrainConfig& cfg) {
    SelfTrainReport rep;
    rep.iteration = cfg.iteration;
    rep.pre_error = mean_infer_error(model, holdout);
    if (unlabeled.empty()) {
        rep.post_error = rep.pre_error;
        return rep;
    }

    std::map<std::pair<std::string, double>, std::vector<const dataset::Correspondence*>>
        groups;
    for (const auto& r : unlabeled) groups[{r.scene, r.t0}].push_back(&r);

    std::vector<MintCandidate> minted;
    std::vector<AssociationResult> matches;
    bool any_camera = false;
    for (const auto& [key, recs] : groups) {
        std::vector<const dataset::Correspondence*> cams;
        for (const auto* r : recs)
            if (r->labeled()) cams.push_back(r);
        if (cams.empty()) continue;
        any_camera = true;

        std::vector<Vec3> cam_coords, phone_coords;
        for (const auto* c : cams) cam_coords.push_back(*c->c_gnd);
        for (const auto* r : recs) phone_coords.push_back(model.infer(r->phone));

        auto results = associate(phone_coords, cam_coords);
        for (auto& a : results) {
            if (a.distance > cfg.max_match_distance) continue;
            const auto* src = recs[static_cast<std::size_t>(a.phone_id)];
            const auto* cam = cams[static_cast<std::size_t>(a.matched_camera_id)];
            a.is_correct = cam->ped == src->ped;
            matches.push_back(a);

            MintCandidate m;
            m.scene = src->scene;
            m.ped = src->ped;
            m.t0 = key.second;
            m.phone = src->phone;
            m.vision = *cam->vision;
            m.c_cam = *cam->c_gnd;
            minted.push_back(std::move(m));
        }
    }
    if (!any_camera) throw NoCameraDetections{};

    rep.precision = matches.empty() ? 0.0 : association_precision(matches);
    rep.minted_count = static_cast<int>(minted.size());

    const dataset::Dataset expanded = expand_dataset(labeled, minted);
    nn::TrainConfig tc;
    tc.epochs = cfg.finetune_epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.finetune_lr;
    tc.lr_late = cfg.finetune_lr;
    tc.seed = cfg.seed;
    gan::train(model, expanded, tc);

    rep.post_error = mean_infer_error(model, holdout);
    return rep;
}

inline void write_report_csv(const std::vector<SelfTrainReport>& reports, std::ostream& os) {
    os.precision(17);
    os << "iteration,precision,minted_count,pre_error,post_error\n";
    for (const auto& r : reports)
        os << r.iteration << ',' << r.precision << ',' << r.minted_count << ',' << r.pre_error
           << ',' << r.post_error << '\n';
}

}  // namespace viloc::selftrain
