#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "canon/groups.hpp"

namespace canon {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat "section.key = value" text config with '#' comments. Unknown keys are
/// rejected after typed extraction (typo safety).
class KeyValueConfig {
public:
    static KeyValueConfig from_file(const std::string& path);
    static KeyValueConfig from_text(const std::string& text, const std::string& origin = "<text>");

    /// Applies a command-line override of the form "section.key=value".
    void set_override(const std::string& assignment);

    std::string get_string(const std::string& key, const std::string& fallback);
    double get_double(const std::string& key, double fallback);
    std::size_t get_size(const std::string& key, std::size_t fallback);
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
    bool get_bool(const std::string& key, bool fallback);
    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& fallback);

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    /// Throws when the file contains keys no getter asked about.
    void reject_unknown() const;

private:
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> touched_;
    std::string origin_;
};

enum class AblationMode { Learned, Frozen, Pca, None };

/// Fully resolved experiment description. Field defaults are the desk-scale
/// training setup; everything is overridable from the config file or --set.
struct ExperimentConfig {
    std::string task = "nbody";  // nbody | glyphs | shapes | idx-images

    // data
    std::size_t n_train = 2000, n_test = 500;
    std::uint64_t data_seed = 12345;
    std::string data_dir;  // resolved against --out when empty
    std::size_t n_particles = 5, n_steps = 1000;
    double dt = 1e-3, softening = 0.1;
    std::size_t hw = 28;
    GroupSpec data_group{GroupKind::Cn, 8};
    bool jitter = true, symmetric_class = false;
    std::size_t n_points = 128;
    double noise = 0.02;
    std::string idx_images, idx_labels;

    // model
    AblationMode ablation = AblationMode::Learned;
    GroupSpec model_group{GroupKind::Cn, 8};
    bool partial = false;
    std::size_t lift_channels = 2, gconv_layers = 1, gconv_channels = 2, lift_pool = 2;
    std::size_t vn_hidden = 32;
    bool vn_nonlinear = true;
    bool translation_learned = false;
    bool fallback_identity = false;
    std::vector<std::size_t> cnn_channels = {8, 16, 32};
    std::vector<std::size_t> cnn_strides = {1, 2, 2};
    std::size_t cnn_kernel = 3, fc_hidden = 64;
    bool cnn_standardize = true;
    std::size_t gnn_hidden = 32, gnn_layers = 4;
    std::size_t ds_phi_hidden = 64, ds_phi_out = 128, ds_rho_hidden = 64;

    // training
    std::size_t epochs = 40, batch_size = 100;
    double learning_rate = 1e-3, weight_decay = 1e-8;
    std::uint64_t seed = 1;
    std::size_t patience = 20;
    double val_fraction = 0.1;
    std::size_t phase2_epochs = 0;  // pretrained protocol: reinit predictor, freeze canonicalizer

    // eval
    std::string eval_transform = "none";  // none or a group spec
    std::uint64_t eval_seed = 777;
    std::string eval_split = "test";
    std::string checkpoint;  // defaults to <out>/model.canon1

    // audit
    GroupSpec audit_group{GroupKind::Od, 3};
    std::size_t audit_transforms = 4, audit_samples = 250;
    double audit_tol = 1e-6;
    bool audit_exhaustive = false;
    std::string audit_checkpoint;

    // bench
    std::vector<std::size_t> bench_orders = {4, 8, 16, 32, 64};
    std::size_t bench_reps = 25, bench_batch = 32;

    // output
    bool plots = false;
    bool timing = false;  // real wall_ms in metrics.csv breaks byte-determinism

    static ExperimentConfig from_config(KeyValueConfig& kv);
    static ExperimentConfig load(const std::string& path,
                                 const std::vector<std::string>& overrides);
    std::string resolved_text() const;
    void validate() const;
};

}  // namespace canon
