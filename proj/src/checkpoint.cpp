#include "gendistill/checkpoint.hpp"

#include <cstring>
#include <filesystem>

#include "gendistill/errors.hpp"

namespace gendistill {

void write_module(torch::serialize::OutputArchive& archive, const std::string& ns,
                  const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters()) archive.write(ns + "/" + p.key(), p.value().detach());
  for (const auto& b : module.named_buffers()) archive.write(ns + "/" + b.key(), b.value(), /*is_buffer=*/true);
}

void read_module(torch::serialize::InputArchive& archive, const std::string& ns, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& name, torch::Tensor& target) {
    torch::Tensor value;
    if (!archive.try_read(ns + "/" + name, value)) {
      throw FormatError("checkpoint is missing entry '" + ns + "/" + name + "'");
    }
    if (value.sizes() != target.sizes()) {
      throw FormatError("checkpoint entry '" + ns + "/" + name + "' has mismatched shape");
    }
    target.copy_(value);
  };
  for (auto& p : module.named_parameters()) load(p.key(), p.value());
  for (auto& b : module.named_buffers()) load(b.key(), b.value());
}

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value) {
  auto t = torch::empty({static_cast<int64_t>(value.size())}, torch::kChar);
  if (!value.empty()) std::memcpy(t.data_ptr<int8_t>(), value.data(), value.size());
  archive.write(key, t);
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
  torch::Tensor t;
  if (!archive.try_read(key, t)) throw FormatError("checkpoint is missing entry '" + key + "'");
  t = t.contiguous();
  std::string s(static_cast<size_t>(t.numel()), '\0');
  if (t.numel() > 0) std::memcpy(s.data(), t.data_ptr<int8_t>(), s.size());
  return s;
}

void write_int(torch::serialize::OutputArchive& archive, const std::string& key, int64_t value) {
  archive.write(key, torch::tensor({value}, torch::kLong));
}

int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key) {
  torch::Tensor t;
  if (!archive.try_read(key, t) || t.numel() != 1) {
    throw FormatError("checkpoint is missing integer entry '" + key + "'");
  }
  return t.item<int64_t>();
}

void write_doubles(torch::serialize::OutputArchive& archive, const std::string& key, const std::vector<double>& v) {
  archive.write(key, torch::tensor(v, torch::kDouble));
}

std::vector<double> read_doubles(torch::serialize::InputArchive& archive, const std::string& key) {
  torch::Tensor t;
  if (!archive.try_read(key, t)) throw FormatError("checkpoint is missing entry '" + key + "'");
  t = t.to(torch::kDouble).contiguous();
  return {t.data_ptr<double>(), t.data_ptr<double>() + t.numel()};
}

bool has_key(torch::serialize::InputArchive& archive, const std::string& key) {
  torch::Tensor t;
  return archive.try_read(key, t);
}

torch::serialize::InputArchive open_archive(const std::string& path) {
  if (!std::filesystem::exists(path)) throw FormatError("checkpoint not found: " + path);
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw FormatError("cannot read checkpoint " + path + ": " + e.what_without_backtrace());
  }
  const int64_t version = read_int(archive, "format_version");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("checkpoint " + path + " has format version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointFormatVersion));
  }
  return archive;
}

}  // namespace gendistill
