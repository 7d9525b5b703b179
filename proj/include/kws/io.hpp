#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kws/audio.hpp"

namespace kws::io {

enum class SampleFormat { Pcm16, Float32 };

struct WavInfo {
  std::size_t channels = 0;
  std::size_t frames = 0;
  int sample_rate_hz = 0;
  SampleFormat format = SampleFormat::Pcm16;
};

// PCM16 samples map to s / 32768, so full-scale positive is 1 - 2^-15.
// WAVE_FORMAT_EXTENSIBLE headers are accepted for both formats. Any
// structural problem raises ParseError naming the byte offset.
Waveform read_wav(const std::filesystem::path& path);
WavInfo read_wav_info(const std::filesystem::path& path);

// PCM16 writes round(x * 32768) clamped to [-32768, 32767].
void write_wav(const Waveform& w, const std::filesystem::path& path,
               SampleFormat format = SampleFormat::Pcm16);

std::vector<std::uint8_t> encode_wav(const Waveform& w, SampleFormat format = SampleFormat::Pcm16);
Waveform decode_wav(const std::vector<std::uint8_t>& bytes, WavInfo* info = nullptr);

enum class Field { Near, Mid, Far };

std::string to_string(Field f);
Field parse_field(const std::string& s);  // throws ParseError
// Channel count a recording of this field carries: 1 / 2 / 6.
std::size_t field_channels(Field f);

// One JSON object per line: {"id", "audio", "label", "field"}. `audio` is a
// single multi-channel file or a list of mono files, one per channel.
struct ManifestEntry {
  std::string id;
  std::vector<std::filesystem::path> audio;
  int label = 0;
  Field field = Field::Far;
};

// Relative audio paths resolve against the manifest's directory. Errors
// name the 1-based line. With check_audio, files must exist and their
// channel count must match the field.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, bool check_audio = true);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

// Loads every channel of an entry into one Waveform.
Waveform load_entry_audio(const ManifestEntry& e);

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

// Layout: "KWSM" | u32 version | u32 meta_len | meta JSON | u32 count |
// per tensor (u32 name_len | name | u32 rank | u32 dims[rank] | f32 values)
// | u32 CRC-32 of all preceding bytes. All integers little-endian.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
// Throws FormatError on bad magic, unknown version, checksum mismatch,
// inconsistent lengths or trailing bytes.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace kws::io
