#ifndef MDTS_TESTS_HELPERS_HPP
#define MDTS_TESTS_HELPERS_HPP

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "mdts/corpus.hpp"
#include "mdts/model.hpp"

namespace mdts::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mdts_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline DomainRef make_domain(const std::string& name, int variates, bool multivariate = true) {
  auto d = std::make_shared<DomainSpec>();
  d->name = name;
  d->variates = default_variate_names(name, variates);
  d->multivariate = multivariate;
  d->nominal_frequency = 100.0;
  return d;
}

inline TimeSeriesSample random_sample(const DomainRef& d, Eigen::Index length, Rng& rng) {
  TimeSeriesSample s;
  s.domain = d;
  s.values = normal_matrix<double>(static_cast<Eigen::Index>(d->analysis_variates().size()), length, 1.0, rng);
  for (int v = 0; v < s.values.rows(); ++v) s.variate_subset.push_back(v);
  return s;
}

inline PreparedSample full(const Matrix<double>& values) {
  PreparedSample p;
  p.values = values;
  p.time_validity.assign(static_cast<std::size_t>(values.cols()), true);
  return p;
}

/// Tiny model with a short context.
template <typename S>
Model<S> tiny_model(int context_length, std::uint64_t seed = 1) {
  ModelConfig c = ModelConfig::tiny();
  c.context_length = context_length;
  Rng rng(seed);
  return Model<S>(c, rng);
}

}  // namespace mdts::testing

#endif  // MDTS_TESTS_HELPERS_HPP
