#include "ehrnav/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ehrnav/error.hpp"
#include "ehrnav/serialize.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::embed {

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::invalid_argument, "cosine: dimension mismatch (" + std::to_string(u.size()) +
                                                 " vs " + std::to_string(v.size()) + ")");
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw Error(ErrorCode::invalid_argument, "cosine: zero-norm operand");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

void normalize(Vector& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) {
    const double c = 1.0 / std::sqrt(static_cast<double>(v.size()));
    std::fill(v.begin(), v.end(), c);
    return;
  }
  const double n = std::sqrt(sq);
  for (double& x : v) x /= n;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool token_byte(unsigned char c) { return c >= 0x80 || std::isalnum(c); }

}  // namespace

std::vector<Vector> HashEmbedding::embed_batch(const std::vector<std::string>& texts) {
  std::vector<Vector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    Vector v(dimension_, 0.0);
    const std::string folded = text::casefold(t);
    std::size_t i = 0;
    while (i < folded.size()) {
      while (i < folded.size() && !token_byte(static_cast<unsigned char>(folded[i]))) ++i;
      std::size_t j = i;
      while (j < folded.size() && token_byte(static_cast<unsigned char>(folded[j]))) ++j;
      if (j > i) {
        const std::uint64_t h = fnv1a(std::string_view(folded).substr(i, j - i));
        v[h % dimension_] += ((h >> 32) & 1u) ? -1.0 : 1.0;
      }
      i = j;
    }
    out.push_back(std::move(v));
  }
  return out;
}

Embedder::Embedder(std::shared_ptr<EmbeddingBackend> backend) : backend_(std::move(backend)) {
  if (!backend_) throw Error(ErrorCode::config, "embedder requires a backend");
}

Vector Embedder::embed(std::string_view text) { return embed_all({std::string(text)}).front(); }

std::vector<Vector> Embedder::embed_all(const std::vector<std::string>& texts) {
  std::vector<std::string> normalized;
  normalized.reserve(texts.size());
  for (const auto& t : texts) normalized.push_back(text::collapse_whitespace(t));

  // Empty inputs never reach the backend; they map to the constant vector.
  std::vector<std::string> to_send;
  for (const auto& t : normalized) {
    if (!t.empty()) to_send.push_back(t);
  }
  std::vector<Vector> raw;
  if (!to_send.empty()) raw = backend_->embed_batch(to_send);
  if (raw.size() != to_send.size()) {
    throw Error(ErrorCode::backend_transport, "embedding backend returned wrong number of vectors");
  }
  calls_.fetch_add(static_cast<std::int64_t>(texts.size()));

  std::vector<Vector> out;
  out.reserve(texts.size());
  std::size_t next = 0;
  for (const auto& t : normalized) {
    Vector v = t.empty() ? Vector(backend_->dimension(), 0.0) : std::move(raw[next++]);
    if (v.size() != backend_->dimension()) {
      throw Error(ErrorCode::backend_transport, "embedding backend returned wrong dimension");
    }
    for (double x : v) {
      if (!std::isfinite(x)) throw Error(ErrorCode::backend_transport, "embedding contains non-finite values");
    }
    normalize(v);
    out.push_back(std::move(v));
  }
  return out;
}

void VectorIndex::add(std::string key, Vector vector, std::string payload_digest) {
  if (dimension_ == 0) dimension_ = vector.size();
  if (vector.size() != dimension_) {
    throw Error(ErrorCode::invalid_argument, "vector index: dimension mismatch for key " + key);
  }
  for (double x : vector) {
    if (!std::isfinite(x)) throw Error(ErrorCode::invalid_argument, "vector index: non-finite entry in " + key);
  }
  if (!keys_.insert(key).second) throw Error(ErrorCode::invalid_argument, "vector index: duplicate key " + key);
  entries_.push_back(Entry{std::move(key), std::move(vector), std::move(payload_digest)});
}

const Vector& VectorIndex::vector_of(std::string_view key) const {
  for (const auto& e : entries_) {
    if (e.key == key) return e.vector;
  }
  throw Error(ErrorCode::not_found, "vector index: no key " + std::string(key));
}

std::vector<Scored> VectorIndex::top_k(std::span<const double> query, std::size_t k) const {
  std::vector<std::size_t> all(entries_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return rank(query, k, all);
}

std::vector<Scored> VectorIndex::rank(std::span<const double> query, std::size_t k,
                                      const std::vector<std::size_t>& candidates) const {
  if (!entries_.empty() && query.size() != dimension_) {
    throw Error(ErrorCode::invalid_argument, "vector index: query dimension mismatch");
  }
  std::vector<Scored> scored;
  scored.reserve(candidates.size());
  for (std::size_t i : candidates) scored.push_back(Scored{entries_[i].key, cosine(query, entries_[i].vector)});
  const std::size_t n = std::min(k, scored.size());
  auto better = [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.key < b.key;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), better);
  scored.resize(n);
  return scored;
}

namespace {
constexpr const char* kFormat = "ehrnav.vector_index";
constexpr int kVersion = 1;
}  // namespace

void VectorIndex::save(const std::filesystem::path& path, const std::string& backend_id,
                       const std::string& corpus_fingerprint) const {
  Json entries = Json::array();
  for (const auto& e : entries_) {
    entries.push_back(Json{{"key", e.key}, {"payload", e.payload_digest}, {"vector", e.vector}});
  }
  Json j{{"format", kFormat},     {"version", kVersion},  {"backend", backend_id},
         {"corpus", corpus_fingerprint}, {"dimension", dimension_}, {"entries", std::move(entries)}};
  write_file(path, j.dump());
}

std::optional<VectorIndex> VectorIndex::load(const std::filesystem::path& path, const std::string& backend_id,
                                             const std::string& corpus_fingerprint) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const Json j = Json::parse(read_file(path));
    if (j.value("format", "") != kFormat || j.value("version", 0) != kVersion ||
        j.value("backend", "") != backend_id || j.value("corpus", "") != corpus_fingerprint) {
      return std::nullopt;
    }
    VectorIndex index(j.at("dimension").get<std::size_t>());
    for (const auto& e : j.at("entries")) {
      index.add(e.at("key").get<std::string>(), e.at("vector").get<Vector>(), e.value("payload", ""));
    }
    return index;
  } catch (const std::exception&) {
    // A damaged dump is treated as stale.
    return std::nullopt;
  }
}

}  // namespace ehrnav::embed
