#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ehrnav::embed {

using Vector = std::vector<double>;

/// dot(u, v) / (|u| |v|), clamped to [-1, 1]. Throws on dimension mismatch or
/// a zero-norm operand.
double cosine(std::span<const double> u, std::span<const double> v);

/// Scales to unit Euclidean norm; a zero vector becomes the constant vector
/// (1/sqrt(d), ..., 1/sqrt(d)).
void normalize(Vector& v);

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dimension() const = 0;
  /// Raw (possibly unnormalized) vectors, one per input text.
  virtual std::vector<Vector> embed_batch(const std::vector<std::string>& texts) = 0;
};

/// Model-free backend: each token is hashed (FNV-1a 64) into one of `dimension`
/// signed buckets. Tokens are casefolded runs of letters and digits, so the
/// vectors reflect lexical overlap only; they carry no semantics.
class HashEmbedding final : public EmbeddingBackend {
 public:
  explicit HashEmbedding(std::size_t dimension = 64) : dimension_(dimension) {}
  std::string id() const override { return "hash-" + std::to_string(dimension_); }
  std::size_t dimension() const override { return dimension_; }
  std::vector<Vector> embed_batch(const std::vector<std::string>& texts) override;

 private:
  std::size_t dimension_;
};

struct RemoteEmbeddingConfig {
  std::string endpoint;  // base URL; requests go to {endpoint}/embeddings
  std::string api_key_env;
  std::string model;
  std::size_t dimension = 1024;
  double timeout_s = 120.0;
};

class RemoteEmbedding final : public EmbeddingBackend {
 public:
  explicit RemoteEmbedding(RemoteEmbeddingConfig config) : config_(std::move(config)) {}
  std::string id() const override { return "remote:" + config_.model; }
  std::size_t dimension() const override { return config_.dimension; }
  std::vector<Vector> embed_batch(const std::vector<std::string>& texts) override;

 private:
  RemoteEmbeddingConfig config_;
};

/// Front for a backend: whitespace-normalizes input, unit-normalizes output,
/// and counts embedded texts.
class Embedder {
 public:
  explicit Embedder(std::shared_ptr<EmbeddingBackend> backend);

  Vector embed(std::string_view text);
  std::vector<Vector> embed_all(const std::vector<std::string>& texts);

  std::int64_t call_count() const { return calls_.load(); }
  std::string backend_id() const { return backend_->id(); }
  std::size_t dimension() const { return backend_->dimension(); }

 private:
  std::shared_ptr<EmbeddingBackend> backend_;
  std::atomic<std::int64_t> calls_{0};
};

struct Scored {
  std::string key;
  double score = 0.0;
  bool operator==(const Scored&) const = default;
};

/// Exact in-memory cosine index. Ties in score are broken by ascending key.
class VectorIndex {
 public:
  explicit VectorIndex(std::size_t dimension = 0) : dimension_(dimension) {}

  /// Throws on duplicate key, non-finite entries or dimension mismatch.
  void add(std::string key, Vector vector, std::string payload_digest = {});

  std::size_t size() const { return entries_.size(); }
  std::size_t dimension() const { return dimension_; }
  const Vector& vector_of(std::string_view key) const;

  /// Exactly min(k, size) results, best first.
  std::vector<Scored> top_k(std::span<const double> query, std::size_t k) const;

  /// Same ranking restricted to keys accepted by `keep`.
  template <typename Pred>
  std::vector<Scored> top_k_filtered(std::span<const double> query, std::size_t k, Pred keep) const {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (keep(entries_[i].key)) candidates.push_back(i);
    }
    return rank(query, k, candidates);
  }

  /// Versioned structured-text dump keyed by (backend id, corpus fingerprint).
  void save(const std::filesystem::path& path, const std::string& backend_id,
            const std::string& corpus_fingerprint) const;
  /// nullopt when the file is missing, of another version, or keyed differently.
  static std::optional<VectorIndex> load(const std::filesystem::path& path, const std::string& backend_id,
                                         const std::string& corpus_fingerprint);

 private:
  struct Entry {
    std::string key;
    Vector vector;
    std::string payload_digest;
  };

  std::vector<Scored> rank(std::span<const double> query, std::size_t k,
                           const std::vector<std::size_t>& candidates) const;

  std::size_t dimension_;
  std::vector<Entry> entries_;
  std::unordered_set<std::string> keys_;
};

}  // namespace ehrnav::embed
