#pragma once

// On-disk formats: the FQBT quantized-model container, the float checkpoint
// (FQCK), calibration text, and calibrated-spec files. Layouts are described
// in docs/FORMAT.md.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fqbert/model.hpp"

namespace fqbert {

enum class DType : uint8_t {
  kI4Packed = 0,
  kI8 = 1,
  kU8 = 2,
  kI32 = 3,
  kScale8 = 4,    // u8 mantissa, i8 exponent
  kLnParam8 = 5,  // [2, H]: gamma row then beta row, signed Q1.6
  kF32 = 6,
  kRequant = 7,   // i32 multiplier, i32 shift
  kI2Packed = 8,
};

const char* dtype_name(DType d);
std::size_t dtype_byte_length(DType d, std::size_t elements);

struct TensorEntry {
  std::string name;
  DType dtype = DType::kI8;
  std::vector<uint32_t> dims;
  std::vector<uint8_t> bytes;

  std::size_t elements() const;
  bool operator==(const TensorEntry&) const = default;
};

inline constexpr uint16_t kFqbtVersion = 1;
inline constexpr std::size_t kFqbtAlign = 64;

struct FqbtContainer {
  ModelConfig config;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const;
  const TensorEntry& at(const std::string& name) const;  // FormatError if absent
  bool operator==(const FqbtContainer&) const = default;
};

std::vector<uint8_t> serialize(const FqbtContainer& c);
FqbtContainer parse_container(std::span<const uint8_t> bytes);
void save(const FqbtContainer& c, const std::filesystem::path& path);
FqbtContainer load(const std::filesystem::path& path);

uint32_t crc32_ieee(std::span<const uint8_t> bytes);

// Two's-complement codes packed little-nibble-first (i4) or lowest-bits-first
// (i2). A trailing partial byte is zero-padded.
std::vector<uint8_t> pack_i4(std::span<const int32_t> v);
std::vector<int32_t> unpack_i4(std::span<const uint8_t> bytes, std::size_t count);
std::vector<uint8_t> pack_i2(std::span<const int32_t> v);
std::vector<int32_t> unpack_i2(std::span<const uint8_t> bytes, std::size_t count);

FqbtContainer container_from_model(const QuantModel& qm);
QuantModel model_from_container(const FqbtContainer& c);

// Weight quantization plus container assembly.
FqbtContainer quantize_model(const FloatModel& fm, const SiteSpecs& specs);

struct CompressionReport {
  int64_t encoder_quant_bytes = 0;
  int64_t encoder_float_bytes = 0;
  int64_t host_float_bytes = 0;
  double encoder_ratio = 0.0;
  double with_host_ratio = 0.0;

  std::string to_text() const;
};

// Encoder accounting counts tensors named "layer*" and "encoder.*" against
// fp32 encoder weights, biases and LN parameters; the second ratio adds the
// float host tensors to both sides.
CompressionReport compression_report(const FqbtContainer& c);

// ---- float checkpoint ----------------------------------------------------

std::vector<std::pair<std::string, std::vector<uint32_t>>> checkpoint_schema(const ModelConfig& mc);
void save_float_checkpoint(const FloatModel& fm, const std::filesystem::path& path);
// Reads the checkpoint and checks every tensor against `mc`.
FloatModel import_float_checkpoint(const std::filesystem::path& path, const ModelConfig& mc);
// Takes the model configuration from the checkpoint manifest.
FloatModel import_float_checkpoint(const std::filesystem::path& path);

// ---- calibration -----------------------------------------------------------

using CalibStream = std::vector<std::vector<int32_t>>;

// One sequence per line, whitespace-separated token ids; blank lines skipped.
CalibStream parse_calib_text(const std::string& text, const ModelConfig& mc);
CalibStream read_calib_file(const std::filesystem::path& path, const ModelConfig& mc);

// Float pass per sequence; max|A| at every site folded with ema_update. The
// clip threshold of each returned spec is the final EMA value.
SiteSpecs calibrate(const FloatModel& fm, const CalibStream& stream, const QuantSpec& defaults);

std::string specs_to_json(const SiteSpecs& specs);
SiteSpecs specs_from_json(const std::string& text);

std::string read_file_text(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace fqbert
