#include "canon/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "canon/canonicalization.hpp"
#include "canon/checkpoint.hpp"
#include "canon/pipeline.hpp"
#include "canon/tasks.hpp"

namespace canon {

BenchRow time_callable(const std::string& component, std::size_t group_order,
                       const std::function<void()>& fn, std::size_t reps) {
    reps = std::max<std::size_t>(reps, 20);
    for (int warm = 0; warm < 3; ++warm) fn();
    std::vector<double> ms(reps);
    for (std::size_t r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    BenchRow row;
    row.component = component;
    row.group_order = group_order;
    row.median_ms = ms[reps / 2];
    row.iqr_ms = ms[(3 * reps) / 4] - ms[reps / 4];
    row.reps = reps;
    return row;
}

std::vector<BenchRow> benchmark_inference(const ExperimentConfig& cfg) {
    std::vector<BenchRow> rows;
    NoGradGuard no_grad;

    // shapes task: canonicalizer vs predictor vs full pipeline on one batch
    {
        ShapeGenConfig gc;
        gc.n_samples = cfg.bench_batch;
        gc.n_points = cfg.n_points;
        ShapeDataset ds = gen_shapes(gc, cfg.data_seed);
        std::vector<Sample> batch;
        for (const auto& s : ds.samples) {
            PointCloud pc;
            pc.X = s.points;
            batch.push_back(Sample{pc});
        }
        PointCloudClassifierSpec spec;
        spec.canon = CanonKind::Learned;
        spec.canonicalizer.dim = 3;
        spec.canonicalizer.net.hidden = cfg.vn_hidden;
        spec.canonicalizer.net.nonlinear = cfg.vn_nonlinear;
        spec.predictor.in_features = 3;
        spec.predictor.phi_hidden = cfg.ds_phi_hidden;
        spec.predictor.phi_out = cfg.ds_phi_out;
        spec.predictor.rho_hidden = cfg.ds_rho_hidden;
        PointCloudClassifierPipeline pipeline(spec, cfg.seed);

        PointCloudClassifierSpec raw = spec;
        raw.canon = CanonKind::None;
        PointCloudClassifierPipeline predictor_only(raw, cfg.seed);

        rows.push_back(time_callable(
            "pointcloud_predictor", 0,
            [&] { predictor_only.forward_batch(batch); }, cfg.bench_reps));
        rows.push_back(time_callable(
            "pointcloud_canonicalizer", 0,
            [&] {
                for (const auto& s : batch)
                    pipeline.canonicalizer()->canonicalize_element(std::get<PointCloud>(s));
            },
            cfg.bench_reps));
        rows.push_back(time_callable(
            "pointcloud_pipeline", 0, [&] { pipeline.forward_batch(batch); }, cfg.bench_reps));
    }

    // image canonicalizer and full group-convolution predictor across orders
    {
        GlyphGenConfig gc;
        gc.n_samples = cfg.bench_batch;
        gc.hw = cfg.hw;
        gc.group = GroupSpec{GroupKind::Cn, 1};
        GlyphDataset ds = gen_glyphs(gc, cfg.data_seed);

        for (std::size_t order : cfg.bench_orders) {
            ImageCanonicalizerSpec cs;
            cs.group = GroupSpec{GroupKind::Cn, static_cast<int>(order)};
            cs.in_channels = 1;
            cs.image_hw = cfg.hw;
            cs.lift_channels = cfg.lift_channels;
            cs.gconv_layers = 0;  // inference fast path is lifting-only
            ImageCanonicalizer canon(cs, cfg.seed);
            canon.refresh_fast_bank();
            std::vector<Image> batch;
            for (const auto& s : ds.samples) batch.push_back(s.image);
            rows.push_back(time_callable(
                "image_canonicalizer", order,
                [&] { canon.canonicalize_fast_batch(batch); }, cfg.bench_reps));
        }
        // group-convolution cost scales with the order squared: time a single
        // half-resolution image per call so the order-64 point stays tractable
        GlyphGenConfig small = gc;
        small.n_samples = 1;
        small.hw = cfg.hw / 2;
        GlyphDataset small_ds = gen_glyphs(small, cfg.data_seed);
        for (std::size_t order : cfg.bench_orders) {
            Rng rng = Rng::seeded(cfg.seed);
            GcnnBaseline gcnn(GroupSpec{GroupKind::Cn, static_cast<int>(order)}, 4, 8, rng);
            rows.push_back(time_callable(
                "gcnn_predictor", order,
                [&] { gcnn.forward(small_ds.samples[0].image); }, 20));
        }
    }
    return rows;
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "component,group_order,median_ms,iqr_ms,reps\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%zu\n", r.component.c_str(),
                      r.group_order, r.median_ms, r.iqr_ms, r.reps);
        os << buf;
    }
}

}  // namespace canon
