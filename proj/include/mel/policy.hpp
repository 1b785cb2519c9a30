#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mel/features.hpp"
#include "mel/taskenv.hpp"
#include "mel/vocab.hpp"

namespace mel {

// Sparse map (feature key, token) -> weight, stored as dense rows over the
// vocabulary per feature. Absent entries read as 0. Used for parameters and
// for gradients.
class WeightTable {
public:
    WeightTable() = default;
    explicit WeightTable(std::size_t width) : width_(width) {}

    std::size_t width() const { return width_; }
    std::size_t rows() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }

    double get(FeatureKey key, TokenId token) const;
    void set(FeatureKey key, TokenId token, double value);
    void add(FeatureKey key, TokenId token, double value);

    const std::vector<double>* row(FeatureKey key) const {
        auto it = rows_.find(key);
        return it == rows_.end() ? nullptr : &it->second;
    }
    std::vector<double>& mutable_row(FeatureKey key);

    // this += scale * other
    void axpy(double scale, const WeightTable& other);
    void scale(double s);

    std::vector<FeatureKey> sorted_keys() const;
    double squared_norm() const;  // summed in sorted key order
    double norm() const;
    double dot(const WeightTable& other) const;
    bool all_finite() const;
    std::size_t nonzeros() const;

    // Bit-exact equality of every stored value; absent rows equal zero rows.
    bool operator==(const WeightTable& other) const;

    const std::unordered_map<FeatureKey, std::vector<double>>& data() const { return rows_; }

private:
    std::size_t width_ = 0;
    std::unordered_map<FeatureKey, std::vector<double>> rows_;
};

struct PolicyParams {
    std::shared_ptr<const Vocabulary> vocab;
    FeatureSpec spec;
    WeightTable weights;

    PolicyParams() = default;
    PolicyParams(std::shared_ptr<const Vocabulary> v, FeatureSpec s)
        : vocab(std::move(v)), spec(s), weights(vocab->size()) {}
    std::size_t vocab_size() const { return vocab->size(); }
};

// Frozen copy of the parameters at rollout time (theta_old).
class PolicySnapshot {
public:
    explicit PolicySnapshot(const PolicyParams& params) : frozen_(std::make_shared<const PolicyParams>(params)) {}
    const PolicyParams& params() const { return *frozen_; }

private:
    std::shared_ptr<const PolicyParams> frozen_;
};

struct DecodingConfig {
    double temperature = 1.0;  // 0 = greedy, ties to the lowest token id
    int max_tokens = 40;
    std::uint64_t seed = 0;
};

// Fresh toy parameters carrying the base-model prior.
PolicyParams make_base_policy(std::shared_ptr<const Vocabulary> vocab, const FeatureSpec& spec,
                              const PriorConfig& prior, std::span<const int> moduli, int max_len);

// Softmax at temperature 1 over the vocabulary.
std::vector<double> token_distribution(const PolicyParams& params, std::span<const TokenId> context);

// Samples a response after `prompt`. Log-probabilities are recorded under the
// temperature-1 distribution of the same parameters.
Trajectory sample(const PolicyParams& params, std::span<const TokenId> prompt, const DecodingConfig& config);

// entry t = log pi(target_t | context ++ target_<t)
std::vector<double> sequence_log_prob(const PolicyParams& params, std::span<const TokenId> context,
                                      std::span<const TokenId> target);

// Gradient of sum_t log pi(target_t | ...), as a sparse table.
WeightTable log_prob_grad(const PolicyParams& params, std::span<const TokenId> context,
                          std::span<const TokenId> target);

// out += sum_t coeff[t] * grad log pi(target_t | ...). Positions with a zero
// coefficient are skipped. Returns the per-token log-probabilities.
std::vector<double> accumulate_log_prob_grad(const PolicyParams& params, std::span<const TokenId> context,
                                             std::span<const TokenId> target, std::span<const double> coeff,
                                             WeightTable& out);

// Params checkpoint: header with format version, vocabulary and feature spec,
// then one "key token weight" line per nonzero entry in sorted order. Weights
// are written in shortest round-trip form, so save/load is bit-exact.
void save_params(std::ostream& out, const PolicyParams& params);
PolicyParams load_params(std::istream& in);

}  // namespace mel
