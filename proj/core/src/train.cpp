#include "canon/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

namespace canon {

// ---- Adam ----------------------------------------------------------------------

Adam::Adam(const std::vector<ParameterStore*>& stores, double lr, double weight_decay,
           double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (ParameterStore* store : stores)
        for (auto& [name, t] : store->items()) {
            Slot slot;
            slot.param = t;
            slot.m.assign(t.size(), 0.0);
            slot.v.assign(t.size(), 0.0);
            slots_.push_back(std::move(slot));
        }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Slot& slot : slots_) {
        if (!slot.param.has_grad()) continue;
        const auto& g = slot.param.grad();
        auto& w = slot.param.raw_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + wd_ * w[i];
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
            w[i] -= lr_ * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps_);
        }
    }
}

void Adam::zero_grads() {
    for (Slot& slot : slots_) slot.param.zero_grad();
}

std::size_t Adam::parameter_count() const {
    std::size_t n = 0;
    for (const Slot& slot : slots_) n += slot.param.size();
    return n;
}

// ---- metrics CSV -----------------------------------------------------------------

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "epoch,split,loss,metric,wall_ms,equivariance_max_dev\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                      r.split.c_str(), r.loss, r.metric, r.wall_ms, r.equivariance_max_dev);
        os << buf;
    }
}

// ---- data ----------------------------------------------------------------------------

namespace {

Sample nbody_input(const NBodySample& s) {
    PointCloud pc;
    pc.X = s.x0;
    pc.V = s.v0;
    pc.q = s.q;
    pc.has_velocities = true;
    return Sample{pc};
}

std::string dataset_path(const ExperimentConfig& cfg, const std::string& out_dir,
                         const std::string& split) {
    const std::string dir = cfg.data_dir.empty() ? out_dir + "/data" : cfg.data_dir;
    std::filesystem::create_directories(dir);
    return dir + "/" + cfg.task + "_" + split + ".canon1";
}

}  // namespace

TaskData load_or_generate(const ExperimentConfig& cfg, const std::string& out_dir) {
    TaskData data;
    if (cfg.task == "nbody") {
        data.classification = false;
        const std::string train_path = dataset_path(cfg, out_dir, "train");
        const std::string test_path = dataset_path(cfg, out_dir, "test");
        NBodyDataset train_ds, test_ds;
        if (std::filesystem::exists(train_path) && std::filesystem::exists(test_path)) {
            train_ds = load_nbody(train_path);
            test_ds = load_nbody(test_path);
        } else {
            NBodyGenConfig gc;
            gc.n_particles = cfg.n_particles;
            gc.dt = cfg.dt;
            gc.n_steps = cfg.n_steps;
            gc.softening = cfg.softening;
            gc.n_samples = cfg.n_train;
            train_ds = gen_nbody(gc, cfg.data_seed);
            gc.n_samples = cfg.n_test;
            test_ds = gen_nbody(gc, cfg.data_seed + 1);
            save_nbody(train_path, train_ds, cfg.data_seed);
            save_nbody(test_path, test_ds, cfg.data_seed + 1);
        }
        for (const auto& s : train_ds.samples) {
            data.train_x.push_back(nbody_input(s));
            data.train_t.push_back(s.xt);
        }
        for (const auto& s : test_ds.samples) {
            data.test_x.push_back(nbody_input(s));
            data.test_t.push_back(s.xt);
        }
        return data;
    }
    if (cfg.task == "glyphs") {
        const std::string train_path = dataset_path(cfg, out_dir, "train");
        const std::string test_path = dataset_path(cfg, out_dir, "test");
        GlyphDataset train_ds, test_ds;
        if (std::filesystem::exists(train_path) && std::filesystem::exists(test_path)) {
            train_ds = load_glyphs(train_path);
            test_ds = load_glyphs(test_path);
        } else {
            GlyphGenConfig gc;
            gc.n_classes = 8;
            gc.group = cfg.data_group;
            gc.hw = cfg.hw;
            gc.jitter = cfg.jitter;
            gc.include_symmetric_class = cfg.symmetric_class;
            gc.n_samples = cfg.n_train;
            train_ds = gen_glyphs(gc, cfg.data_seed);
            gc.n_samples = cfg.n_test;
            test_ds = gen_glyphs(gc, cfg.data_seed + 1);
            save_glyphs(train_path, train_ds, cfg.data_seed);
            save_glyphs(test_path, test_ds, cfg.data_seed + 1);
        }
        data.n_classes = std::max(train_ds.n_classes, test_ds.n_classes);
        for (const auto& s : train_ds.samples) {
            data.train_x.push_back(Sample{s.image});
            data.train_y.push_back(s.label);
        }
        for (const auto& s : test_ds.samples) {
            data.test_x.push_back(Sample{s.image});
            data.test_y.push_back(s.label);
        }
        return data;
    }
    if (cfg.task == "shapes") {
        const std::string train_path = dataset_path(cfg, out_dir, "train");
        const std::string test_path = dataset_path(cfg, out_dir, "test");
        ShapeDataset train_ds, test_ds;
        if (std::filesystem::exists(train_path) && std::filesystem::exists(test_path)) {
            train_ds = load_shapes(train_path);
            test_ds = load_shapes(test_path);
        } else {
            ShapeGenConfig gc;
            gc.n_points = cfg.n_points;
            gc.noise = cfg.noise;
            gc.n_samples = cfg.n_train;
            train_ds = gen_shapes(gc, cfg.data_seed);
            gc.n_samples = cfg.n_test;
            test_ds = gen_shapes(gc, cfg.data_seed + 1);
            save_shapes(train_path, train_ds, cfg.data_seed);
            save_shapes(test_path, test_ds, cfg.data_seed + 1);
        }
        data.n_classes = std::max(train_ds.n_classes, test_ds.n_classes);
        for (const auto& s : train_ds.samples) {
            PointCloud pc;
            pc.X = s.points;
            data.train_x.push_back(Sample{pc});
            data.train_y.push_back(s.label);
        }
        for (const auto& s : test_ds.samples) {
            PointCloud pc;
            pc.X = s.points;
            data.test_x.push_back(Sample{pc});
            data.test_y.push_back(s.label);
        }
        return data;
    }
    if (cfg.task == "idx-images") {
        auto images = read_idx_images(cfg.idx_images);
        auto labels = read_idx_labels(cfg.idx_labels);
        if (images.size() != labels.size())
            throw IoError("idx-images: image/label counts differ (" +
                          std::to_string(images.size()) + " vs " + std::to_string(labels.size()) +
                          ")");
        const std::size_t n_train = std::min(cfg.n_train, images.size());
        const std::size_t n_test = std::min(cfg.n_test, images.size() - n_train);
        std::size_t max_label = 0;
        for (std::size_t i = 0; i < n_train; ++i) {
            data.train_x.push_back(Sample{images[i]});
            data.train_y.push_back(labels[i]);
            max_label = std::max<std::size_t>(max_label, labels[i]);
        }
        for (std::size_t i = n_train; i < n_train + n_test; ++i) {
            data.test_x.push_back(Sample{images[i]});
            data.test_y.push_back(labels[i]);
            max_label = std::max<std::size_t>(max_label, labels[i]);
        }
        data.n_classes = max_label + 1;
        return data;
    }
    throw ConfigError("unknown task '" + cfg.task + "'");
}

// ---- pipeline assembly ------------------------------------------------------------------

namespace {

CanonKind canon_kind(AblationMode m) {
    switch (m) {
        case AblationMode::Learned:
        case AblationMode::Frozen:
            return CanonKind::Learned;
        case AblationMode::Pca:
            return CanonKind::Pca;
        case AblationMode::None:
            return CanonKind::None;
    }
    return CanonKind::None;
}

}  // namespace

std::unique_ptr<Pipeline> build_pipeline(const ExperimentConfig& cfg) {
    if (cfg.task == "nbody") {
        NBodyPipelineSpec spec;
        spec.canon = canon_kind(cfg.ablation);
        spec.canonicalizer.dim = 3;
        spec.canonicalizer.use_velocities = true;
        spec.canonicalizer.net.hidden = cfg.vn_hidden;
        spec.canonicalizer.net.nonlinear = cfg.vn_nonlinear;
        spec.canonicalizer.translation =
            cfg.translation_learned ? TranslationMode::Learned : TranslationMode::Centroid;
        spec.canonicalizer.fallback_identity = cfg.fallback_identity;
        spec.predictor.node_features = 7;
        spec.predictor.edge_features = 2;
        spec.predictor.hidden = cfg.gnn_hidden;
        spec.predictor.layers = cfg.gnn_layers;
        spec.predictor.n_out = 3;
        return std::make_unique<NBodyPipeline>(spec, cfg.seed);
    }
    if (cfg.task == "glyphs" || cfg.task == "idx-images") {
        ImageClassifierSpec spec;
        spec.canon = canon_kind(cfg.ablation);
        spec.partial = cfg.partial;
        spec.canonicalizer.group = cfg.model_group;
        spec.canonicalizer.in_channels = 1;
        spec.canonicalizer.image_hw = cfg.hw;
        spec.canonicalizer.lift_channels = cfg.lift_channels;
        spec.canonicalizer.pool = cfg.lift_pool;
        spec.canonicalizer.gconv_layers = cfg.gconv_layers;
        spec.canonicalizer.gconv_channels = cfg.gconv_channels;
        spec.predictor.in_channels = 1;
        spec.predictor.image_hw = cfg.hw;
        spec.predictor.channels = cfg.cnn_channels;
        spec.predictor.strides = cfg.cnn_strides;
        spec.predictor.kernel = cfg.cnn_kernel;
        spec.predictor.fc_hidden = cfg.fc_hidden;
        spec.predictor.standardize = cfg.cnn_standardize;
        spec.predictor.n_out = glyph_class_count(cfg.symmetric_class);
        if (cfg.task == "idx-images") spec.predictor.n_out = 10;
        return std::make_unique<ImageClassifierPipeline>(spec, cfg.seed);
    }
    if (cfg.task == "shapes") {
        PointCloudClassifierSpec spec;
        spec.canon = canon_kind(cfg.ablation);
        spec.canonicalizer.dim = 3;
        spec.canonicalizer.net.hidden = cfg.vn_hidden;
        spec.canonicalizer.net.nonlinear = cfg.vn_nonlinear;
        spec.canonicalizer.fallback_identity = cfg.fallback_identity;
        spec.predictor.in_features = 3;
        spec.predictor.phi_hidden = cfg.ds_phi_hidden;
        spec.predictor.phi_out = cfg.ds_phi_out;
        spec.predictor.rho_hidden = cfg.ds_rho_hidden;
        spec.predictor.n_out = 4;
        return std::make_unique<PointCloudClassifierPipeline>(spec, cfg.seed);
    }
    throw ConfigError("unknown task '" + cfg.task + "'");
}

void save_pipeline_checkpoint(const std::string& path, Pipeline& model) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (ParameterStore* store : model.parameter_stores())
        for (auto& [name, t] : store->items()) tensors.emplace_back(name, t);
    write_canon1(path, tensors);
}

void load_pipeline_checkpoint(const std::string& path, Pipeline& model) {
    auto tensors = read_canon1(path);
    auto stores = model.parameter_stores();
    std::size_t expected = 0;
    for (ParameterStore* s : stores) expected += s->size();
    if (tensors.size() != expected)
        throw IoError("checkpoint " + path + ": tensor count " + std::to_string(tensors.size()) +
                      " does not match architecture (" + std::to_string(expected) + " parameters)");
    for (auto& [name, t] : tensors) {
        bool found = false;
        for (ParameterStore* store : stores) {
            if (!store->contains(name)) continue;
            Tensor& dst = store->at(name);
            if (dst.shape() != t.shape())
                throw IoError("checkpoint " + path + ": shape mismatch for '" + name + "': " +
                              shape_str(dst.shape()) + " vs " + shape_str(t.shape()));
            dst.raw_data() = t.data();
            found = true;
            break;
        }
        if (!found) throw IoError("checkpoint " + path + ": unknown parameter '" + name + "'");
    }
}

// ---- transforms ------------------------------------------------------------------------

void apply_eval_transforms(const std::string& group_text, std::uint64_t seed,
                           std::vector<Sample>& xs, std::vector<Eigen::MatrixXd>* targets) {
    if (group_text == "none" || group_text.empty()) return;
    const GroupSpec spec = parse_group_spec(group_text);
    Rng rng = Rng::seeded(seed);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const GroupElement g = random_element(spec, rng);
        xs[i] = act_sample(g, xs[i]);
        if (targets) {
            PointCloud pc;
            pc.X = (*targets)[i];
            (*targets)[i] = act_pointcloud(g, pc).X;
        }
    }
}

// ---- losses ------------------------------------------------------------------------------

namespace {

struct BatchLoss {
    Tensor loss;
    double metric_sum = 0.0;  // correct count or squared-error sum
    std::size_t metric_den = 0;
};

BatchLoss classification_loss(const Tensor& logits, std::span<const std::size_t> labels) {
    BatchLoss out;
    const std::size_t b = logits.shape()[0], c = logits.shape()[1];
    Tensor p = softmax(logits);
    std::vector<std::size_t> idx(labels.begin(), labels.end());
    Tensor picked = take_per_row(p, idx);
    out.loss = scale(mean_all(log(picked)), -1.0);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits.data()[i * c + j] > logits.data()[i * c + best]) best = j;
        if (best == labels[i]) out.metric_sum += 1.0;
    }
    out.metric_den = b;
    return out;
}

BatchLoss mse_loss(const Tensor& pred, std::span<const Eigen::MatrixXd> targets) {
    BatchLoss out;
    std::vector<double> flat;
    for (const auto& t : targets)
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) flat.push_back(t(i, j));
    Tensor target = Tensor::from_data(pred.shape(), std::move(flat));
    Tensor diff = sub(pred, target);
    out.loss = mean_all(mul(diff, diff));
    out.metric_sum = out.loss.item() * static_cast<double>(pred.size());
    out.metric_den = pred.size();
    return out;
}

double quick_audit_dev(Pipeline& model, const ExperimentConfig& cfg,
                       std::span<const Sample> samples, std::uint64_t salt) {
    if (samples.empty()) return 0.0;
    AuditOptions opts;
    opts.n_transforms = 1;
    opts.tol = cfg.audit_tol;
    Rng rng = Rng::seeded(cfg.seed ^ (0xabcdef1234567890ULL + salt));
    const std::size_t n = std::min<std::size_t>(4, samples.size());
    EquivarianceReport r =
        audit_equivariance(model, cfg.audit_group, samples.subspan(0, n), opts, rng);
    return r.max_rel_dev;
}

struct ParamSnapshot {
    std::vector<std::vector<double>> values;
    void capture(Pipeline& model) {
        values.clear();
        for (ParameterStore* s : model.parameter_stores())
            for (auto& [name, t] : s->items()) values.push_back(t.data());
    }
    void restore(Pipeline& model) const {
        std::size_t i = 0;
        for (ParameterStore* s : model.parameter_stores())
            for (auto& [name, t] : s->items()) t.raw_data() = values[i++];
    }
};

}  // namespace

// ---- train --------------------------------------------------------------------------------

TrainOutput train(const ExperimentConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    TaskData data = load_or_generate(cfg, out_dir);
    auto model = build_pipeline(cfg);

    // frozen canonicalizer: parameters leave the tape entirely
    if (cfg.ablation == AblationMode::Frozen) {
        if (ParameterStore* cs = model->canonicalizer_store())
            for (auto& [name, t] : cs->items()) t.set_requires_grad(false);
    }
    std::vector<ParameterStore*> trainable;
    for (ParameterStore* s : model->parameter_stores()) {
        if (cfg.ablation == AblationMode::Frozen && s == model->canonicalizer_store()) continue;
        trainable.push_back(s);
    }

    // deterministic validation split from the tail of a seeded shuffle
    std::vector<std::size_t> order(data.train_x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng = Rng::seeded(cfg.seed ^ 0x5eed511fULL);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[split_rng.uniform_index(i)]);
    const std::size_t n_val =
        data.classification ? static_cast<std::size_t>(cfg.val_fraction *
                                                       static_cast<double>(order.size()))
                            : std::min<std::size_t>(order.size() / 10, 100);
    std::vector<std::size_t> val_idx(order.end() - static_cast<long>(n_val), order.end());
    std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<long>(n_val));

    Adam opt(trainable, cfg.learning_rate, cfg.weight_decay);
    Rng shuffle_rng = Rng::seeded(cfg.seed + 99);

    TrainOutput out;
    out.checkpoint_path = out_dir + "/model.canon1";

    auto eval_split = [&](const std::vector<std::size_t>& idx) {
        NoGradGuard no_grad;
        double loss_sum = 0.0, metric_sum = 0.0;
        std::size_t metric_den = 0, batches = 0;
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
            std::vector<Sample> xs;
            std::vector<std::size_t> ys;
            std::vector<Eigen::MatrixXd> ts;
            for (std::size_t i = start; i < end; ++i) {
                xs.push_back(data.train_x[idx[i]]);
                if (data.classification) ys.push_back(data.train_y[idx[i]]);
                else ts.push_back(data.train_t[idx[i]]);
            }
            Tensor pred = model->forward_batch(xs);
            BatchLoss bl = data.classification ? classification_loss(pred, ys)
                                               : mse_loss(pred, ts);
            loss_sum += bl.loss.item();
            metric_sum += bl.metric_sum;
            metric_den += bl.metric_den;
            ++batches;
        }
        const double loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        const double metric =
            metric_den ? metric_sum / static_cast<double>(metric_den) : 0.0;
        return std::pair<double, double>(loss, metric);
    };

    double best_val = data.classification ? -1.0 : std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    ParamSnapshot best_params;
    best_params.capture(*model);

    const bool early_stopping = data.classification && cfg.patience > 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[shuffle_rng.uniform_index(i)]);

        double loss_sum = 0.0, metric_sum = 0.0;
        std::size_t metric_den = 0, batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
            std::vector<Sample> xs;
            std::vector<std::size_t> ys;
            std::vector<Eigen::MatrixXd> ts;
            for (std::size_t i = start; i < end; ++i) {
                xs.push_back(data.train_x[train_idx[i]]);
                if (data.classification) ys.push_back(data.train_y[train_idx[i]]);
                else ts.push_back(data.train_t[train_idx[i]]);
            }
            Tensor pred;
            try {
                pred = model->forward_batch(xs);
            } catch (const DegenerateFrame& e) {
                throw std::runtime_error(
                    std::string("train: frame extraction degenerated (symmetric-data "
                                "misconfiguration?): ") +
                    e.what() + "; set model.fallback_identity = true to tolerate isolated cases");
            }
            if (auto* nb = dynamic_cast<NBodyPipeline*>(model.get())) {
                const double rate = static_cast<double>(nb->degenerate_in_last_batch()) /
                                    static_cast<double>(xs.size());
                if (rate > 0.1)
                    throw std::runtime_error(
                        "train: degenerate-frame rate " + std::to_string(rate) +
                        " exceeds 10% of the batch; the data looks symmetric or misconfigured");
            }
            BatchLoss bl = data.classification ? classification_loss(pred, ys)
                                               : mse_loss(pred, ts);
            opt.zero_grads();
            backward(bl.loss);
            opt.step();
            loss_sum += bl.loss.item();
            metric_sum += bl.metric_sum;
            metric_den += bl.metric_den;
            ++batches;
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double wall_ms =
            cfg.timing ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;

        MetricsRow train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        train_row.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        train_row.metric = metric_den ? metric_sum / static_cast<double>(metric_den) : 0.0;
        train_row.wall_ms = wall_ms;
        train_row.equivariance_max_dev =
            quick_audit_dev(*model, cfg, std::span<const Sample>(data.train_x), epoch);
        out.rows.push_back(train_row);

        if (!val_idx.empty()) {
            auto [vloss, vmetric] = eval_split(val_idx);
            MetricsRow val_row;
            val_row.epoch = epoch;
            val_row.split = "val";
            val_row.loss = vloss;
            val_row.metric = vmetric;
            val_row.wall_ms = 0.0;
            val_row.equivariance_max_dev = 0.0;
            out.rows.push_back(val_row);

            const bool improved = data.classification ? vmetric > best_val : vloss < best_val;
            if (improved) {
                best_val = data.classification ? vmetric : vloss;
                since_best = 0;
                best_params.capture(*model);
            } else {
                ++since_best;
            }
            if (early_stopping && since_best >= cfg.patience) {
                out.epochs_run = epoch;
                break;
            }
        } else {
            best_params.capture(*model);
        }
        out.epochs_run = epoch;
    }
    if (early_stopping && !val_idx.empty()) best_params.restore(*model);

    // pretrained protocol: freeze the canonicalizer, reinitialize the
    // predictor from a shifted seed, train again
    if (cfg.phase2_epochs > 0 && model->canonicalizer_store()) {
        std::vector<std::vector<double>> canon_params;
        for (auto& [name, t] : model->canonicalizer_store()->items())
            canon_params.push_back(t.data());
        ExperimentConfig phase2 = cfg;
        phase2.seed = cfg.seed + 1000;
        auto model2 = build_pipeline(phase2);
        {
            std::size_t i = 0;
            for (auto& [name, t] : model2->canonicalizer_store()->items())
                t.raw_data() = canon_params[i++];
        }
        if (ParameterStore* cs = model2->canonicalizer_store())
            for (auto& [name, t] : cs->items()) t.set_requires_grad(false);
        std::vector<ParameterStore*> phase2_stores;
        for (ParameterStore* s : model2->parameter_stores())
            if (s != model2->canonicalizer_store()) phase2_stores.push_back(s);
        Adam opt2(phase2_stores, cfg.learning_rate, cfg.weight_decay);
        Rng shuffle2 = Rng::seeded(cfg.seed + 199);
        for (std::size_t epoch = 1; epoch <= cfg.phase2_epochs; ++epoch) {
            for (std::size_t i = train_idx.size(); i > 1; --i)
                std::swap(train_idx[i - 1], train_idx[shuffle2.uniform_index(i)]);
            for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
                std::vector<Sample> xs;
                std::vector<std::size_t> ys;
                std::vector<Eigen::MatrixXd> ts;
                for (std::size_t i = start; i < end; ++i) {
                    xs.push_back(data.train_x[train_idx[i]]);
                    if (data.classification) ys.push_back(data.train_y[train_idx[i]]);
                    else ts.push_back(data.train_t[train_idx[i]]);
                }
                Tensor pred = model2->forward_batch(xs);
                BatchLoss bl = data.classification ? classification_loss(pred, ys)
                                                   : mse_loss(pred, ts);
                opt2.zero_grads();
                backward(bl.loss);
                opt2.step();
            }
            MetricsRow row;
            row.epoch = cfg.epochs + epoch;
            row.split = "train-phase2";
            row.loss = 0.0;
            out.rows.push_back(row);
        }
        save_pipeline_checkpoint(out.checkpoint_path, *model2);
        write_metrics_csv(out_dir + "/metrics.csv", out.rows);
        return out;
    }

    save_pipeline_checkpoint(out.checkpoint_path, *model);
    write_metrics_csv(out_dir + "/metrics.csv", out.rows);
    return out;
}

// ---- evaluate -------------------------------------------------------------------------------

MetricsRow evaluate(const ExperimentConfig& cfg, const std::string& out_dir) {
    TaskData data = load_or_generate(cfg, out_dir);
    auto model = build_pipeline(cfg);
    const std::string ckpt =
        cfg.checkpoint.empty() ? out_dir + "/model.canon1" : cfg.checkpoint;
    load_pipeline_checkpoint(ckpt, *model);

    std::vector<Sample>& xs = cfg.eval_split == "train" ? data.train_x : data.test_x;
    std::vector<std::size_t>& ys = cfg.eval_split == "train" ? data.train_y : data.test_y;
    std::vector<Eigen::MatrixXd>& ts = cfg.eval_split == "train" ? data.train_t : data.test_t;
    apply_eval_transforms(cfg.eval_transform, cfg.eval_seed, xs,
                          data.classification ? nullptr : &ts);

    NoGradGuard no_grad;
    double loss_sum = 0.0, metric_sum = 0.0;
    std::size_t metric_den = 0, batches = 0;
    for (std::size_t start = 0; start < xs.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(xs.size(), start + cfg.batch_size);
        std::vector<Sample> bx(xs.begin() + static_cast<long>(start),
                               xs.begin() + static_cast<long>(end));
        Tensor pred = model->forward_batch(bx);
        BatchLoss bl;
        if (data.classification) {
            std::vector<std::size_t> by(ys.begin() + static_cast<long>(start),
                                        ys.begin() + static_cast<long>(end));
            bl = classification_loss(pred, by);
        } else {
            std::vector<Eigen::MatrixXd> bt(ts.begin() + static_cast<long>(start),
                                            ts.begin() + static_cast<long>(end));
            bl = mse_loss(pred, bt);
        }
        loss_sum += bl.loss.item();
        metric_sum += bl.metric_sum;
        metric_den += bl.metric_den;
        ++batches;
    }
    MetricsRow row;
    row.epoch = 0;
    row.split = cfg.eval_split +
                (cfg.eval_transform == "none" ? "" : "[" + cfg.eval_transform + "]");
    row.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    row.metric = metric_den ? metric_sum / static_cast<double>(metric_den) : 0.0;
    return row;
}

EquivarianceReport run_audit(const ExperimentConfig& cfg, const std::string& out_dir) {
    TaskData data = load_or_generate(cfg, out_dir);
    auto model = build_pipeline(cfg);
    if (!cfg.audit_checkpoint.empty()) load_pipeline_checkpoint(cfg.audit_checkpoint, *model);

    const std::vector<Sample>& pool = data.test_x.empty() ? data.train_x : data.test_x;
    const std::size_t n = std::min(cfg.audit_samples, pool.size());
    AuditOptions opts;
    opts.n_transforms = cfg.audit_transforms;
    opts.tol = cfg.audit_tol;
    opts.exhaustive_discrete = cfg.audit_exhaustive;
    Rng rng = Rng::seeded(cfg.seed ^ 0xa0d17ULL);
    EquivarianceReport report = audit_equivariance(
        *model, cfg.audit_group, std::span<const Sample>(pool.data(), n), opts, rng);
    write_report_csv(out_dir + "/audit.csv", report);
    return report;
}

}  // namespace canon
