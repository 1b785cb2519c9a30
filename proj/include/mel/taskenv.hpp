#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mel/vocab.hpp"

namespace mel {

struct Query {
    std::string id;
    std::string family;
    std::vector<int> operands;  // a0..aL
    std::vector<Op> ops;        // op1..opL
    int modulus = 0;
    std::int64_t ground_truth = 0;
    std::vector<TokenId> prompt_tokens;  // <bos> a0 op1 a1 ... mod m =>

    int chain_length() const { return static_cast<int>(ops.size()); }
    bool operator==(const Query&) const = default;
};

struct StepRecord {
    int index = 0;  // 1-based
    std::string text;
    std::optional<int> value;
    std::size_t token_begin = 0;  // [begin, end) into Trajectory::tokens
    std::size_t token_end = 0;
};

// Response tokens only; the prompt is not part of a trajectory.
struct Trajectory {
    std::vector<TokenId> tokens;
    std::vector<StepRecord> steps;
    std::optional<std::int64_t> final_answer;
    std::vector<double> token_log_probs;
};

struct StepOracleReport {
    std::vector<int> correct_values;  // v_1..v_L
    std::optional<int> first_deviation;
    std::vector<bool> per_step_correct;  // one per trajectory step
};

struct VerificationResult {
    int reward = 0;
    bool extraction_failed = false;
};

struct Difficulty {
    int min_len = 2;
    int max_len = 4;
};

struct TaskGenConfig {
    std::string family = "modchain";
    int count = 1;
    std::uint64_t seed = 0;
    Difficulty difficulty;
    std::vector<int> moduli = {5, 7};
};

// Largest modulus the default configuration allows.
inline constexpr int kMaxModulus = 97;

bool is_prime(int n);

// Left-to-right reduction: v0 = a0, v_t = (v_{t-1} op_t a_t) mod m.
std::vector<int> chain_values(const Query& q);
std::int64_t apply_op(Op op, std::int64_t lhs, std::int64_t rhs, int modulus);

std::vector<TokenId> render_prompt(const Vocabulary& vocab, const Query& q);
std::string prompt_text(const Query& q);

std::vector<Query> generate_tasks(const Vocabulary& vocab, const TaskGenConfig& config);
// "family=modchain,count=N,seed=S[,min_len=a,max_len=b,moduli=5:7]"
TaskGenConfig parse_gen_spec(std::string_view spec);

// Numerals needed to render every query of `config`.
int numerals_required(const TaskGenConfig& config);

// Splits response tokens into steps (newline-delimited, up to the last ####)
// and extracts the final answer.
void segment_trajectory(const Vocabulary& vocab, Trajectory& traj);

class Verifier {
public:
    virtual ~Verifier() = default;
    virtual VerificationResult verify_text(std::string_view text, std::int64_t ground_truth) const = 0;
};

// Integer after the LAST "####"; whitespace and leading zeros ignored.
class IntegerVerifier final : public Verifier {
public:
    VerificationResult verify_text(std::string_view text, std::int64_t ground_truth) const override;
};

std::optional<std::int64_t> extract_answer(std::string_view text);

VerificationResult verify(const Vocabulary& vocab, const Trajectory& traj, std::int64_t ground_truth,
                          const Verifier& verifier);
VerificationResult verify(const Vocabulary& vocab, const Trajectory& traj, std::int64_t ground_truth);

StepOracleReport step_oracle(const Query& q, const Trajectory& traj);

// Line-delimited JSON task files.
void write_task_file(std::ostream& out, std::span<const Query> queries);
std::vector<Query> read_task_file(std::istream& in, const Vocabulary& vocab);
void save_tasks(const std::string& path, std::span<const Query> queries);
std::vector<Query> load_tasks(const std::string& path, const Vocabulary& vocab);

}  // namespace mel
