#include "canon/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace canon {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config file not found: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str(), path);
}

KeyValueConfig KeyValueConfig::from_text(const std::string& text, const std::string& origin) {
    KeyValueConfig kv;
    kv.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected 'section.key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        kv.values_[key] = value;
    }
    return kv;
}

void KeyValueConfig::set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse number '" + it->second + "'");
    }
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        const long long v = std::stoll(it->second);
        if (v < 0) throw ConfigError("key '" + key + "': must be nonnegative");
        return static_cast<std::size_t>(v);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse integer '" + it->second + "'");
    }
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse integer '" + it->second + "'");
    }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': cannot parse boolean '" + it->second + "'");
}

std::vector<std::size_t> KeyValueConfig::get_size_list(const std::string& key,
                                                       const std::vector<std::size_t>& fallback) {
    touched_[key] = true;
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::size_t> out;
    std::istringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(item)));
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': cannot parse list '" + it->second + "'");
        }
    }
    if (out.empty()) throw ConfigError("key '" + key + "': empty list");
    return out;
}

void KeyValueConfig::reject_unknown() const {
    for (const auto& [key, value] : values_)
        if (!touched_.count(key))
            throw ConfigError(origin_ + ": unknown key '" + key + "' (typo?)");
}

// ---- ExperimentConfig ---------------------------------------------------------

namespace {

AblationMode parse_ablation(const std::string& s) {
    if (s == "learned") return AblationMode::Learned;
    if (s == "frozen") return AblationMode::Frozen;
    if (s == "pca") return AblationMode::Pca;
    if (s == "none") return AblationMode::None;
    throw ConfigError("ablation_mode must be learned|frozen|pca|none, got '" + s + "'");
}

const char* ablation_name(AblationMode m) {
    switch (m) {
        case AblationMode::Learned:
            return "learned";
        case AblationMode::Frozen:
            return "frozen";
        case AblationMode::Pca:
            return "pca";
        case AblationMode::None:
            return "none";
    }
    return "?";
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(KeyValueConfig& kv) {
    ExperimentConfig c;
    c.task = kv.get_string("task", c.task);
    if (c.task != "nbody" && c.task != "glyphs" && c.task != "shapes" && c.task != "idx-images")
        throw ConfigError("task must be nbody|glyphs|shapes|idx-images, got '" + c.task + "'");

    const bool image_task = c.task == "glyphs" || c.task == "idx-images";
    c.n_train = kv.get_size("data.n_train", image_task ? 5000 : (c.task == "shapes" ? 400 : 2000));
    c.n_test = kv.get_size("data.n_test", image_task ? 2000 : 500);
    c.data_seed = kv.get_u64("data.seed", c.data_seed);
    c.data_dir = kv.get_string("data.dir", "");
    c.n_particles = kv.get_size("data.n_particles", c.n_particles);
    c.dt = kv.get_double("data.dt", c.dt);
    c.n_steps = kv.get_size("data.n_steps", c.n_steps);
    c.softening = kv.get_double("data.softening", c.softening);
    c.hw = kv.get_size("data.hw", c.hw);
    c.data_group = parse_group_spec(kv.get_string("data.group", "c8"));
    c.jitter = kv.get_bool("data.jitter", c.jitter);
    c.symmetric_class = kv.get_bool("data.symmetric_class", c.symmetric_class);
    c.n_points = kv.get_size("data.n_points", c.n_points);
    c.noise = kv.get_double("data.noise", c.noise);
    c.idx_images = kv.get_string("data.idx_images", "");
    c.idx_labels = kv.get_string("data.idx_labels", "");

    c.ablation = parse_ablation(kv.get_string("ablation_mode", "learned"));
    c.model_group = parse_group_spec(kv.get_string("model.group", image_task ? "c8" : "o3"));
    c.partial = kv.get_bool("model.partial", c.partial);
    c.lift_channels = kv.get_size("model.lift_channels", c.lift_channels);
    c.lift_pool = kv.get_size("model.lift_pool", c.lift_pool);
    c.gconv_layers = kv.get_size("model.gconv_layers", c.gconv_layers);
    c.gconv_channels = kv.get_size("model.gconv_channels", c.gconv_channels);
    c.vn_hidden = kv.get_size("model.vn_hidden", c.vn_hidden);
    c.vn_nonlinear = kv.get_bool("model.vn_nonlinear", c.vn_nonlinear);
    c.translation_learned = kv.get_bool("model.translation_learned", c.translation_learned);
    c.fallback_identity = kv.get_bool("model.fallback_identity", c.fallback_identity);
    c.cnn_channels = kv.get_size_list("model.cnn_channels", c.cnn_channels);
    c.cnn_strides = kv.get_size_list("model.cnn_strides", c.cnn_strides);
    c.cnn_kernel = kv.get_size("model.cnn_kernel", c.cnn_kernel);
    c.fc_hidden = kv.get_size("model.fc_hidden", c.fc_hidden);
    c.cnn_standardize = kv.get_bool("model.cnn_standardize", c.cnn_standardize);
    c.gnn_hidden = kv.get_size("model.gnn_hidden", c.gnn_hidden);
    c.gnn_layers = kv.get_size("model.gnn_layers", c.gnn_layers);
    c.ds_phi_hidden = kv.get_size("model.ds_phi_hidden", c.ds_phi_hidden);
    c.ds_phi_out = kv.get_size("model.ds_phi_out", c.ds_phi_out);
    c.ds_rho_hidden = kv.get_size("model.ds_rho_hidden", c.ds_rho_hidden);

    c.epochs = kv.get_size("training.epochs", image_task ? 25 : 40);
    c.batch_size = kv.get_size("training.batch_size", 100);
    c.learning_rate = kv.get_double("training.learning_rate", c.learning_rate);
    c.weight_decay = kv.get_double("training.weight_decay", c.weight_decay);
    c.seed = kv.get_u64("training.seed", c.seed);
    c.patience = kv.get_size("training.early_stopping_patience", c.patience);
    c.val_fraction = kv.get_double("training.val_fraction", c.val_fraction);
    c.phase2_epochs = kv.get_size("training.phase2_epochs", c.phase2_epochs);

    c.eval_transform = kv.get_string("eval.transform", c.eval_transform);
    c.eval_seed = kv.get_u64("eval.transform_seed", c.eval_seed);
    c.eval_split = kv.get_string("eval.split", c.eval_split);
    c.checkpoint = kv.get_string("eval.checkpoint", "");

    c.audit_group = parse_group_spec(
        kv.get_string("audit.group", image_task ? "c4" : "o3"));
    c.audit_transforms = kv.get_size("audit.n_transforms", c.audit_transforms);
    c.audit_samples = kv.get_size("audit.n_samples", c.audit_samples);
    c.audit_tol = kv.get_double("audit.tol", c.audit_tol);
    c.audit_exhaustive = kv.get_bool("audit.exhaustive", image_task);
    c.audit_checkpoint = kv.get_string("audit.checkpoint", "");

    c.bench_orders = kv.get_size_list("bench.orders", c.bench_orders);
    c.bench_reps = kv.get_size("bench.reps", c.bench_reps);
    c.bench_batch = kv.get_size("bench.batch", c.bench_batch);

    c.plots = kv.get_bool("output.plots", c.plots);
    c.timing = kv.get_bool("output.timing", c.timing);

    kv.reject_unknown();
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path,
                                        const std::vector<std::string>& overrides) {
    KeyValueConfig kv = KeyValueConfig::from_file(path);
    for (const auto& o : overrides) kv.set_override(o);
    return from_config(kv);
}

void ExperimentConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(static_cast<double>(batch_size), "training.batch_size");
    positive(learning_rate, "training.learning_rate");
    if (weight_decay < 0.0) throw ConfigError("training.weight_decay must be nonnegative");
    positive(static_cast<double>(n_particles), "data.n_particles");
    positive(dt, "data.dt");
    positive(softening, "data.softening");
    positive(static_cast<double>(hw), "data.hw");
    positive(static_cast<double>(n_points), "data.n_points");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ConfigError("training.val_fraction must be in [0, 1)");
    if (cnn_channels.size() != cnn_strides.size())
        throw ConfigError("model.cnn_channels and model.cnn_strides must have equal length");
    if (cnn_kernel % 2 == 0) throw ConfigError("model.cnn_kernel must be odd");
    if (task == "idx-images" && (idx_images.empty() || idx_labels.empty()))
        throw ConfigError("idx-images task requires data.idx_images and data.idx_labels");
}

std::string ExperimentConfig::resolved_text() const {
    std::ostringstream os;
    auto list = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    os << "task = " << task << "\n";
    os << "ablation_mode = " << ablation_name(ablation) << "\n";
    os << "data.n_train = " << n_train << "\n";
    os << "data.n_test = " << n_test << "\n";
    os << "data.seed = " << data_seed << "\n";
    os << "data.dir = " << data_dir << "\n";
    if (task == "nbody") {
        os << "data.n_particles = " << n_particles << "\n";
        os << "data.dt = " << dt << "\n";
        os << "data.n_steps = " << n_steps << "\n";
        os << "data.softening = " << softening << "\n";
    }
    if (task == "glyphs") {
        os << "data.hw = " << hw << "\n";
        os << "data.group = " << to_string(data_group) << "\n";
        os << "data.jitter = " << (jitter ? "true" : "false") << "\n";
        os << "data.symmetric_class = " << (symmetric_class ? "true" : "false") << "\n";
    }
    if (task == "shapes") {
        os << "data.n_points = " << n_points << "\n";
        os << "data.noise = " << noise << "\n";
    }
    if (task == "idx-images") {
        os << "data.idx_images = " << idx_images << "\n";
        os << "data.idx_labels = " << idx_labels << "\n";
    }
    os << "model.group = " << to_string(model_group) << "\n";
    os << "model.partial = " << (partial ? "true" : "false") << "\n";
    os << "model.lift_channels = " << lift_channels << "\n";
    os << "model.lift_pool = " << lift_pool << "\n";
    os << "model.gconv_layers = " << gconv_layers << "\n";
    os << "model.gconv_channels = " << gconv_channels << "\n";
    os << "model.vn_hidden = " << vn_hidden << "\n";
    os << "model.vn_nonlinear = " << (vn_nonlinear ? "true" : "false") << "\n";
    os << "model.translation_learned = " << (translation_learned ? "true" : "false") << "\n";
    os << "model.fallback_identity = " << (fallback_identity ? "true" : "false") << "\n";
    os << "model.cnn_channels = " << list(cnn_channels) << "\n";
    os << "model.cnn_strides = " << list(cnn_strides) << "\n";
    os << "model.cnn_kernel = " << cnn_kernel << "\n";
    os << "model.fc_hidden = " << fc_hidden << "\n";
    os << "model.cnn_standardize = " << (cnn_standardize ? "true" : "false") << "\n";
    os << "model.gnn_hidden = " << gnn_hidden << "\n";
    os << "model.gnn_layers = " << gnn_layers << "\n";
    os << "model.ds_phi_hidden = " << ds_phi_hidden << "\n";
    os << "model.ds_phi_out = " << ds_phi_out << "\n";
    os << "model.ds_rho_hidden = " << ds_rho_hidden << "\n";
    os << "training.epochs = " << epochs << "\n";
    os << "training.batch_size = " << batch_size << "\n";
    os << "training.learning_rate = " << learning_rate << "\n";
    os << "training.weight_decay = " << weight_decay << "\n";
    os << "training.seed = " << seed << "\n";
    os << "training.early_stopping_patience = " << patience << "\n";
    os << "training.val_fraction = " << val_fraction << "\n";
    os << "training.phase2_epochs = " << phase2_epochs << "\n";
    os << "eval.transform = " << eval_transform << "\n";
    os << "eval.transform_seed = " << eval_seed << "\n";
    os << "eval.split = " << eval_split << "\n";
    os << "eval.checkpoint = " << checkpoint << "\n";
    os << "audit.group = " << to_string(audit_group) << "\n";
    os << "audit.n_transforms = " << audit_transforms << "\n";
    os << "audit.n_samples = " << audit_samples << "\n";
    os << "audit.tol = " << audit_tol << "\n";
    os << "audit.exhaustive = " << (audit_exhaustive ? "true" : "false") << "\n";
    os << "audit.checkpoint = " << audit_checkpoint << "\n";
    os << "bench.orders = " << list(bench_orders) << "\n";
    os << "bench.reps = " << bench_reps << "\n";
    os << "bench.batch = " << bench_batch << "\n";
    os << "output.plots = " << (plots ? "true" : "false") << "\n";
    os << "output.timing = " << (timing ? "true" : "false") << "\n";
    return os.str();
}

}  // namespace canon
