#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mpca {

// Configuration rejected before any computation ran (bad dimensions, malformed
// spec, unsupported parameter combination).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A machine exceeded its per-round send or receive word budget.
struct BudgetViolation : std::runtime_error {
  explicit BudgetViolation(const std::string& what) : std::runtime_error(what) {}
};

// Randomized construction failed verification after the retry limit.
struct ConstructionFailed : std::runtime_error {
  explicit ConstructionFailed(const std::string& what) : std::runtime_error(what) {}
};

// Output collection: an output index was never written.
struct OutputMissing : std::runtime_error {
  explicit OutputMissing(const std::string& what) : std::runtime_error(what) {}
};

// Output collection: an output index was written more than once.
struct DuplicateOutputIndex : std::runtime_error {
  explicit DuplicateOutputIndex(const std::string& what) : std::runtime_error(what) {}
};

// Autoregressive decoding requires every head to be causally masked.
struct NonCausalSpec : std::runtime_error {
  explicit NonCausalSpec(const std::string& what) : std::runtime_error(what) {}
};

// Attention-trace request on a kernelized head (no softmax matrix exists).
struct KernelTraceUnavailable : std::runtime_error {
  explicit KernelTraceUnavailable(const std::string& what) : std::runtime_error(what) {}
};

// A value left the representable fixed-point range for the active precision.
struct PrecisionOverflow : std::runtime_error {
  explicit PrecisionOverflow(const std::string& what) : std::runtime_error(what) {}
};

// Packet encoding: a source holds more outgoing messages than the slot layout supports.
struct TooManyMessages : std::runtime_error {
  explicit TooManyMessages(const std::string& what) : std::runtime_error(what) {}
};

// Sparse propagation: some index has more contributors than the head was built for.
struct DegreeExceeded : std::runtime_error {
  explicit DegreeExceeded(const std::string& what) : std::runtime_error(what) {}
};

// Packet decoding: the averaged row is nonzero but yields no message (invalid encoding upstream).
struct UndecodableRow : std::runtime_error {
  explicit UndecodableRow(const std::string& what) : std::runtime_error(what) {}
};

// Input does not fit the token windows (n_in > q*s).
struct CapacityExceeded : ConfigError {
  explicit CapacityExceeded(const std::string& what) : ConfigError(what) {}
};

// Best-effort compile-time probe caught a local function exceeding its send budget.
struct BudgetViolationAtCompileTime : BudgetViolation {
  explicit BudgetViolationAtCompileTime(const std::string& what) : BudgetViolation(what) {}
};

// The per-machine word budget s cannot host the requested simulation.
struct InsufficientMemory : std::runtime_error {
  explicit InsufficientMemory(const std::string& what) : std::runtime_error(what) {}
};

// A position argument fell outside the sequence.
struct IndexOutOfRange : std::runtime_error {
  explicit IndexOutOfRange(const std::string& what) : std::runtime_error(what) {}
};

// Every label in a sample is the undefined marker, so no error rate exists.
struct AllBottom : std::runtime_error {
  explicit AllBottom(const std::string& what) : std::runtime_error(what) {}
};

// A lookup target pointed past its own row under a causal mask.
struct NonCausalTarget : std::runtime_error {
  explicit NonCausalTarget(const std::string& what) : std::runtime_error(what) {}
};

// An edge list failed the 2-regularity requirement of the cycle encoders.
struct InvalidGraph : ConfigError {
  explicit InvalidGraph(const std::string& what) : ConfigError(what) {}
};

// A generated object would exceed the caller's size budget.
struct BudgetExceeded : std::runtime_error {
  explicit BudgetExceeded(const std::string& what) : std::runtime_error(what) {}
};

// A shared-board write exceeded the per-message space budget.
struct SpaceBudgetExceeded : BudgetViolation {
  int64_t player = 0;
  int64_t round = 0;
  int64_t bits = 0;
  SpaceBudgetExceeded(int64_t player_, int64_t round_, int64_t bits_, int64_t budget_)
      : BudgetViolation("player " + std::to_string(player_) + " round " +
                        std::to_string(round_) + " wrote " + std::to_string(bits_) +
                        " bits, budget " + std::to_string(budget_)),
        player(player_),
        round(round_),
        bits(bits_) {}
};

// The sequence is too short to give every participant a nonempty window.
struct TooFewTokens : ConfigError {
  explicit TooFewTokens(const std::string& what) : ConfigError(what) {}
};

// A layer-to-layer edge set is not a perfect matching.
struct InvalidMatching : ConfigError {
  explicit InvalidMatching(const std::string& what) : ConfigError(what) {}
};

// Normalized matrix inner product of matrices without support.
struct ZeroMatrices : ConfigError {
  explicit ZeroMatrices(const std::string& what) : ConfigError(what) {}
};

// A report or artifact file could not be written.
struct IoFailure : std::runtime_error {
  explicit IoFailure(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mpca
