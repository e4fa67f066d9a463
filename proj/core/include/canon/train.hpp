#pragma once

#include <memory>

#include "canon/config.hpp"
#include "canon/pipeline.hpp"
#include "canon/tasks.hpp"

namespace canon {

/// Adam with bias correction; weight decay is added to the gradient.
class Adam {
public:
    Adam(const std::vector<ParameterStore*>& stores, double lr, double weight_decay,
         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step();
    void zero_grads();
    std::size_t parameter_count() const;

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, wd_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

struct MetricsRow {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    double metric = 0.0;  // accuracy for classification, MSE for dynamics
    double wall_ms = 0.0;
    double equivariance_max_dev = 0.0;
};

/// Frozen schema: epoch,split,loss,metric,wall_ms,equivariance_max_dev.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

/// Task data resolved to samples plus targets/labels.
struct TaskData {
    std::vector<Sample> train_x, test_x;
    std::vector<std::size_t> train_y, test_y;        // classification labels
    std::vector<Eigen::MatrixXd> train_t, test_t;    // dynamics targets
    std::size_t n_classes = 0;
    bool classification = true;
};

/// Loads datasets from data.dir, generating and saving them when absent.
TaskData load_or_generate(const ExperimentConfig& cfg, const std::string& out_dir);

std::unique_ptr<Pipeline> build_pipeline(const ExperimentConfig& cfg);

void save_pipeline_checkpoint(const std::string& path, Pipeline& model);
void load_pipeline_checkpoint(const std::string& path, Pipeline& model);

struct TrainOutput {
    std::vector<MetricsRow> rows;
    std::string checkpoint_path;
    std::size_t epochs_run = 0;
};

TrainOutput train(const ExperimentConfig& cfg, const std::string& out_dir);

MetricsRow evaluate(const ExperimentConfig& cfg, const std::string& out_dir);

EquivarianceReport run_audit(const ExperimentConfig& cfg, const std::string& out_dir);

/// Applies the eval-time transformation regime to a copy of the samples (and
/// dynamics targets, which transform with the same element).
void apply_eval_transforms(const std::string& group_text, std::uint64_t seed,
                           std::vector<Sample>& xs, std::vector<Eigen::MatrixXd>* targets);

}  // namespace canon
