#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace gendistill {

inline constexpr int64_t kCheckpointFormatVersion = 1;

/// Named-parameter archive helpers. Entries are stored as "<ns>/<name>";
/// parameters and buffers share the namespace.
void write_module(torch::serialize::OutputArchive& archive, const std::string& ns,
                  const torch::nn::Module& module);
/// Copies archived values into an existing module; throws FormatError when an
/// entry is missing or has a different shape.
void read_module(torch::serialize::InputArchive& archive, const std::string& ns, torch::nn::Module& module);

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value);
std::string read_string(torch::serialize::InputArchive& archive, const std::string& key);
void write_int(torch::serialize::OutputArchive& archive, const std::string& key, int64_t value);
int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key);
void write_doubles(torch::serialize::OutputArchive& archive, const std::string& key, const std::vector<double>& v);
std::vector<double> read_doubles(torch::serialize::InputArchive& archive, const std::string& key);
bool has_key(torch::serialize::InputArchive& archive, const std::string& key);

/// Opens an archive and checks its format version.
torch::serialize::InputArchive open_archive(const std::string& path);

}  // namespace gendistill
