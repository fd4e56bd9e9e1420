#pragma once

#include <filesystem>
#include <string>

#include "semfl/data/dataset.hpp"

namespace semfl::data {

/// CIFAR binary format: one label byte (two for CIFAR-100: coarse, fine)
/// followed by 3072 CHW pixel bytes per record. `dir` is the extracted
/// batches directory.
Dataset load_cifar10(const std::filesystem::path& dir, bool train);
Dataset load_cifar100(const std::filesystem::path& dir, bool train);

/// Extracted tiny-imagenet-200 tree; the validation split serves as test set.
Dataset load_tinyimagenet(const std::filesystem::path& dir, bool train);

struct FetchOptions {
  std::filesystem::path cache_dir = "data";
  bool download = true;
  /// Expected archive digest, "md5:<hex>" or "sha256:<hex>". Empty uses the
  /// built-in value for the dataset; "none" skips the check.
  std::string checksum;
};

/// Returns the extracted dataset directory under the cache, downloading and
/// unpacking the archive when needed. Throws ProviderError when the data is
/// absent and cannot be fetched, IntegrityError on checksum mismatch.
std::filesystem::path ensure_dataset(DatasetKind kind, const FetchOptions& options);

/// Loads a real dataset split through ensure_dataset.
Dataset load_dataset(DatasetKind kind, bool train, const FetchOptions& options);

// Archive helpers, exposed for testing.
void extract_tar_gz(const std::filesystem::path& archive, const std::filesystem::path& dest);
void extract_zip(const std::filesystem::path& archive, const std::filesystem::path& dest);
void download_file(const std::string& url, const std::filesystem::path& dest);
/// Verifies "md5:<hex>" / "sha256:<hex>"; throws IntegrityError on mismatch.
void verify_checksum(const std::filesystem::path& file, const std::string& checksum);

}  // namespace semfl::data
