#include "canon/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "canon/checkpoint.hpp"

namespace canon {

std::vector<double> apply_output_rep(OutputRep rep, const GroupElement& g,
                                     const std::vector<double>& y, std::size_t n_rows,
                                     std::size_t dim) {
    if (rep == OutputRep::Invariant) return y;
    if (y.size() != n_rows * dim)
        throw ShapeError("apply_output_rep: output length " + std::to_string(y.size()) +
                         " does not match " + std::to_string(n_rows) + "x" + std::to_string(dim));
    PointCloud pc;
    pc.X = Eigen::MatrixXd(n_rows, dim);
    for (std::size_t i = 0; i < n_rows; ++i)
        for (std::size_t j = 0; j < dim; ++j) pc.X(i, j) = y[i * dim + j];
    PointCloud moved = act_pointcloud(g, pc);
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < n_rows; ++i)
        for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = moved.X(i, j);
    return out;
}

// ---- point-cloud classification ----------------------------------------------

PointCloudClassifierPipeline::PointCloudClassifierPipeline(const PointCloudClassifierSpec& spec,
                                                           std::uint64_t seed)
    : spec_(spec) {
    if (spec.canon == CanonKind::Learned) {
        PointCloudCanonicalizerSpec cs = spec.canonicalizer;
        cs.use_velocities = false;
        canonicalizer_ = std::make_unique<PointCloudCanonicalizer>(cs, seed);
    }
    Rng rng = Rng::seeded(seed + 1);
    predictor_ = DeepSetsNet(predictor_params_, "predictor", spec.predictor, rng);
}

Tensor PointCloudClassifierPipeline::canonical_points(const Tensor& x) {
    switch (spec_.canon) {
        case CanonKind::Learned: {
            auto res = canonicalizer_->canonicalize(x);
            Tensor xc = add_rowvec(x, scale(res.translation, -1.0));
            return matmul(xc, transpose(res.frame_rows));
        }
        case CanonKind::Pca: {
            Eigen::MatrixXd xm = matrix_from_tensor(x);
            Eigen::MatrixXd frame = pca_frame(xm);
            Eigen::RowVectorXd centroid = xm.colwise().mean();
            return tensor_from_matrix((xm.rowwise() - centroid) * frame);
        }
        case CanonKind::None:
            return x;
    }
    throw std::logic_error("unreachable");
}

PipelineOutput PointCloudClassifierPipeline::forward_sample(const Sample& x, bool want_canonical) {
    const auto& pc = std::get<PointCloud>(x);
    Tensor xt = tensor_from_matrix(pc.X);
    PipelineOutput out;
    Tensor canonical;
    try {
        canonical = canonical_points(xt);
    } catch (const DegenerateFrame&) {
        throw;
    }
    const std::size_t n = canonical.shape()[0], d = canonical.shape()[1];
    Tensor batch = reshape(canonical, {1, n, d});
    out.y = reshape(predictor_.forward(batch), {spec_.predictor.n_out});
    if (want_canonical) {
        PointCloud cpc;
        cpc.X = matrix_from_tensor(canonical);
        out.canonical = Sample{cpc};
    }
    return out;
}

Tensor PointCloudClassifierPipeline::forward_batch(std::span<const Sample> xs) {
    std::vector<Tensor> canon;
    canon.reserve(xs.size());
    for (const auto& s : xs) {
        const auto& pc = std::get<PointCloud>(s);
        Tensor c = canonical_points(tensor_from_matrix(pc.X));
        canon.push_back(reshape(c, {1, c.shape()[0], c.shape()[1]}));
    }
    return predictor_.forward(concat(canon, 0));
}

std::vector<ParameterStore*> PointCloudClassifierPipeline::parameter_stores() {
    std::vector<ParameterStore*> stores;
    if (canonicalizer_) stores.push_back(&canonicalizer_->parameters());
    stores.push_back(&predictor_params_);
    return stores;
}

ParameterStore* PointCloudClassifierPipeline::canonicalizer_store() {
    return canonicalizer_ ? &canonicalizer_->parameters() : nullptr;
}

// ---- n-body dynamics --------------------------------------------------------------

NBodyPipeline::NBodyPipeline(const NBodyPipelineSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.canon == CanonKind::Learned) {
        PointCloudCanonicalizerSpec cs = spec.canonicalizer;
        cs.use_velocities = true;
        canonicalizer_ = std::make_unique<PointCloudCanonicalizer>(cs, seed);
    }
    Rng rng = Rng::seeded(seed + 1);
    predictor_ = Gnn(predictor_params_, "predictor", spec.predictor, rng);
}

namespace {

void fully_connected_edges(std::size_t batch, std::size_t n, std::vector<std::size_t>& src,
                           std::vector<std::size_t>& dst) {
    src.clear();
    dst.clear();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                src.push_back(b * n + j);  // message from j into i
                dst.push_back(b * n + i);
            }
}

}  // namespace

Tensor NBodyPipeline::forward_batch(std::span<const Sample> xs) {
    degenerate_last_batch_ = 0;
    const std::size_t batch = xs.size();
    std::vector<Tensor> node_blocks, frames, translations;
    std::vector<double> charges;
    std::size_t n_points = 0;
    for (const auto& s : xs) {
        const auto& pc = std::get<PointCloud>(s);
        if (!pc.has_velocities) throw ShapeError("nbody forward: sample has no velocities");
        n_points = static_cast<std::size_t>(pc.X.rows());
        Tensor x = tensor_from_matrix(pc.X);
        Tensor v = tensor_from_matrix(pc.V);
        Tensor frame_rows, translation;
        switch (spec_.canon) {
            case CanonKind::Learned: {
                auto res = canonicalizer_->canonicalize(x, &v);
                if (res.degenerate) ++degenerate_last_batch_;
                frame_rows = res.frame_rows;
                translation = res.translation;
                break;
            }
            case CanonKind::Pca: {
                Eigen::MatrixXd frame = pca_frame(pc.X);
                frame_rows = tensor_from_matrix(frame.transpose());
                Eigen::RowVectorXd c = pc.X.colwise().mean();
                translation = Tensor::from_data({3}, {c(0), c(1), c(2)});
                break;
            }
            case CanonKind::None: {
                frame_rows = tensor_from_matrix(Eigen::MatrixXd::Identity(3, 3));
                translation = Tensor::zeros({3});
                break;
            }
        }
        Tensor xc = matmul(add_rowvec(x, scale(translation, -1.0)), transpose(frame_rows));
        Tensor vc = matmul(v, transpose(frame_rows));
        std::vector<double> qcol(n_points);
        for (std::size_t i = 0; i < n_points; ++i) {
            qcol[i] = pc.q.size() ? pc.q(static_cast<Eigen::Index>(i)) : 0.0;
            charges.push_back(qcol[i]);
        }
        Tensor qt = Tensor::from_data({n_points, 1}, qcol);
        node_blocks.push_back(concat({xc, vc, qt}, 1));  // [N, 7]
        frames.push_back(frame_rows);
        translations.push_back(translation);
    }
    Tensor nodes = concat(node_blocks, 0);  // [B*N, 7]

    std::vector<std::size_t> src, dst;
    fully_connected_edges(batch, n_points, src, dst);
    // edge features: charge product and squared canonical distance
    std::vector<double> qq(src.size());
    for (std::size_t e = 0; e < src.size(); ++e) qq[e] = charges[src[e]] * charges[dst[e]];
    // canonical positions = first 3 node-feature columns, extracted by a
    // fixed selector so the graph stays differentiable
    Tensor pos_cols = Tensor::zeros({0});
    {
        std::vector<double> sel(7 * 3, 0.0);
        sel[0 * 3 + 0] = sel[1 * 3 + 1] = sel[2 * 3 + 2] = 1.0;
        Tensor selector = Tensor::from_data({7, 3}, sel);
        pos_cols = matmul(nodes, selector);  // [B*N, 3]
    }
    Tensor diff = sub(gather_rows(pos_cols, src), gather_rows(pos_cols, dst));
    Tensor d2 = reshape(batched_dot(diff, diff), {src.size(), 1});
    Tensor qqt = Tensor::from_data({src.size(), 1}, qq);
    Tensor edge_feat = concat({qqt, d2}, 1);

    Tensor delta = predictor_.forward(nodes, src, dst, edge_feat);  // [B*N, 3]
    Tensor yhat = add(pos_cols, delta);
    std::vector<Tensor> outputs;
    outputs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<std::size_t> rows(n_points);
        for (std::size_t i = 0; i < n_points; ++i) rows[i] = b * n_points + i;
        Tensor yb = add_rowvec(matmul(gather_rows(yhat, rows), frames[b]), translations[b]);
        outputs.push_back(yb);
    }
    return concat(outputs, 0);  // [B*N, 3]
}

PipelineOutput NBodyPipeline::forward_sample(const Sample& x, bool want_canonical) {
    const Sample* xp = &x;
    PipelineOutput out;
    Tensor y = forward_batch(std::span<const Sample>(xp, 1));
    out.y = y;
    out.degenerate = degenerate_last_batch_ > 0;
    if (want_canonical) {
        const auto& pc = std::get<PointCloud>(x);
        if (spec_.canon == CanonKind::Learned) {
            EuclideanElement g = canonicalizer_->canonicalize_element(pc);
            out.canonical = act_sample(inverse(GroupElement{g}), x);
        } else {
            out.canonical = x;
        }
    }
    return out;
}

std::vector<ParameterStore*> NBodyPipeline::parameter_stores() {
    std::vector<ParameterStore*> stores;
    if (canonicalizer_) stores.push_back(&canonicalizer_->parameters());
    stores.push_back(&predictor_params_);
    return stores;
}

ParameterStore* NBodyPipeline::canonicalizer_store() {
    return canonicalizer_ ? &canonicalizer_->parameters() : nullptr;
}

// ---- image classification -----------------------------------------------------------

ImageClassifierPipeline::ImageClassifierPipeline(const ImageClassifierSpec& spec,
                                                 std::uint64_t seed)
    : spec_(spec) {
    if (spec.canon == CanonKind::Learned) {
        ImageCanonicalizerSpec cs = spec.canonicalizer;
        cs.spatial = spec.partial;
        canonicalizer_ = std::make_unique<ImageCanonicalizer>(cs, seed);
    }
    Rng rng = Rng::seeded(seed + 1);
    CnnSpec ps = spec.predictor;
    if (spec.partial) {
        // exact translation audit path: circular padding, no striding, and a
        // pooled head so circular shifts cancel entirely
        ps.pad = PadMode::Circular;
        for (auto& s : ps.strides) s = 1;
        ps.head = CnnHead::GlobalPool;
    }
    predictor_ = Cnn(predictor_params_, "predictor", ps, rng);
    spec_.predictor = ps;
}

Tensor ImageClassifierPipeline::canonical_image(const Tensor& img, bool* unique_argmax) {
    switch (spec_.canon) {
        case CanonKind::Learned: {
            auto res = canonicalizer_->canonicalize(img, soft_);
            if (unique_argmax) *unique_argmax = res.unique_argmax;
            return res.canonical;
        }
        case CanonKind::Pca: {
            auto res = pca_canonicalize_image(image_from_tensor(img));
            if (unique_argmax) *unique_argmax = true;
            return tensor_from_image(res.canonical);
        }
        case CanonKind::None:
            if (unique_argmax) *unique_argmax = true;
            return img;
    }
    throw std::logic_error("unreachable");
}

PipelineOutput ImageClassifierPipeline::forward_sample(const Sample& x, bool want_canonical) {
    const auto& img = std::get<Image>(x);
    Tensor xt = tensor_from_image(img);
    PipelineOutput out;
    Tensor canonical = canonical_image(xt, &out.unique_argmax);
    Tensor batch = reshape(canonical, {1, img.channels, img.height, img.width});
    out.y = reshape(predictor_.forward(batch), {spec_.predictor.n_out});
    if (want_canonical) out.canonical = Sample{image_from_tensor(canonical)};
    return out;
}

Tensor ImageClassifierPipeline::forward_batch(std::span<const Sample> xs) {
    std::vector<Tensor> canon;
    canon.reserve(xs.size());
    for (const auto& s : xs) {
        const auto& img = std::get<Image>(s);
        Tensor c = canonical_image(tensor_from_image(img), nullptr);
        canon.push_back(reshape(c, {1, img.channels, img.height, img.width}));
    }
    return predictor_.forward(concat(canon, 0));
}

std::vector<ParameterStore*> ImageClassifierPipeline::parameter_stores() {
    std::vector<ParameterStore*> stores;
    if (canonicalizer_) stores.push_back(&canonicalizer_->parameters());
    stores.push_back(&predictor_params_);
    return stores;
}

ParameterStore* ImageClassifierPipeline::canonicalizer_store() {
    return canonicalizer_ ? &canonicalizer_->parameters() : nullptr;
}

// ---- equivariance audit ---------------------------------------------------------------

namespace {

struct OutputGeometry {
    std::size_t n_rows = 0, dim = 0;
};

OutputGeometry output_geometry(OutputRep rep, const Sample& x, std::size_t y_len) {
    OutputGeometry g;
    if (rep == OutputRep::Positions) {
        const auto& pc = std::get<PointCloud>(x);
        g.n_rows = static_cast<std::size_t>(pc.X.rows());
        g.dim = static_cast<std::size_t>(pc.X.cols());
        if (g.n_rows * g.dim != y_len)
            throw ShapeError("audit: positions output length mismatch");
    }
    return g;
}

/// Relaxed criterion: canonical(g.x) must equal canonical(x) up to an
/// element of the stabilizer of the canonical sample.
bool relaxed_holds(Pipeline& model, const GroupSpec& spec, const Sample& x, const Sample& gx,
                   double tol) {
    auto base = model.forward_sample(x, true);
    auto moved = model.forward_sample(gx, true);
    if (!base.canonical || !moved.canonical) return false;
    const auto stab = stabilizer_elements(spec, *base.canonical, tol);
    for (const auto& s : stab)
        if (set_matched_diff(act_sample(s, *moved.canonical), *base.canonical, tol) <= tol)
            return true;
    return false;
}

}  // namespace

EquivarianceReport audit_equivariance(Pipeline& model, const GroupSpec& spec,
                                      std::span<const Sample> dataset, const AuditOptions& opts,
                                      Rng& rng) {
    NoGradGuard no_grad;
    EquivarianceReport report;
    report.group = spec;
    report.n_samples = dataset.size();
    report.symmetric_detection_supported = spec.discrete();

    std::vector<GroupElement> fixed_elements;
    if (opts.exhaustive_discrete && spec.discrete()) fixed_elements = enumerate_elements(spec);
    report.n_transforms = fixed_elements.empty() ? opts.n_transforms : fixed_elements.size();

    for (std::size_t si = 0; si < dataset.size(); ++si) {
        const Sample& x = dataset[si];
        auto base = model.forward_sample(x, false);
        const std::vector<double> y0 = base.y.data();
        const OutputGeometry geom = output_geometry(model.output_rep(), x, y0.size());

        bool symmetric = !base.unique_argmax;
        if (report.symmetric_detection_supported && !symmetric)
            symmetric = stabilizer_elements(spec, x, opts.stabilizer_tol).size() > 1;

        for (std::size_t ti = 0; ti < report.n_transforms; ++ti) {
            const GroupElement g =
                fixed_elements.empty() ? random_element(spec, rng) : fixed_elements[ti];
            const Sample gx = act_sample(g, x);
            auto moved = model.forward_sample(gx, false);
            const bool flagged = symmetric || !moved.unique_argmax;

            EquivarianceReport::Row row;
            row.sample_id = si;
            row.transform_id = ti;
            row.group_desc = to_string(g);
            row.symmetric_flag = flagged;

            if (flagged) {
                ++report.symmetric_inputs_flagged;
                const bool ok = relaxed_holds(model, spec, x, gx, std::max(opts.tol, 1e-9));
                if (!ok) ++report.relaxed_failures;
                row.abs_dev = 0.0;
                row.rel_dev = 0.0;
            } else {
                const std::vector<double> expected =
                    apply_output_rep(model.output_rep(), g, y0, geom.n_rows, geom.dim);
                double abs_dev = 0.0, ref = 0.0;
                for (std::size_t i = 0; i < expected.size(); ++i) {
                    abs_dev = std::max(abs_dev, std::abs(moved.y.data()[i] - expected[i]));
                    ref = std::max(ref, std::abs(expected[i]));
                }
                row.abs_dev = abs_dev;
                row.rel_dev = abs_dev / (ref + 1e-12);
                if (row.rel_dev > report.max_rel_dev) {
                    report.max_rel_dev = row.rel_dev;
                    report.worst_sample = si;
                    report.worst_transform = ti;
                }
                report.max_abs_dev = std::max(report.max_abs_dev, row.abs_dev);
            }
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

void write_report_csv(const std::string& path, const EquivarianceReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "sample_id,transform_id,group_desc,abs_dev,rel_dev,symmetric_flag\n";
    char buf[64];
    for (const auto& row : report.rows) {
        os << row.sample_id << "," << row.transform_id << "," << row.group_desc << ",";
        std::snprintf(buf, sizeof buf, "%.17g", row.abs_dev);
        os << buf << ",";
        std::snprintf(buf, sizeof buf, "%.17g", row.rel_dev);
        os << buf << "," << (row.symmetric_flag ? 1 : 0) << "\n";
    }
}

Image circular_shift(const Image& img, long di, long dj) {
    Image out = img;
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const long si = ((i - di) % h + h) % h;
                const long sj = ((j - dj) % w + w) % w;
                out.at(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
                    img.at(c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj));
            }
    return out;
}

}  // namespace canon
