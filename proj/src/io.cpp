#include "kws/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "kws/error.hpp"

namespace kws::io {

namespace {

const char* kModule = "data-io";

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void tag(const char* t) { bytes(t, 4); }

  std::vector<std::uint8_t> out;
};

// Bounds-checked little-endian cursor; `fail` decides the error type.
template <typename E>
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string what) : buf(b), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw E(kModule, what_ + ": truncated at offset " + std::to_string(pos) + " (need " +
                           std::to_string(n) + " bytes, have " + std::to_string(buf.size() - pos) + ")");
    }
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw E(kModule, what_ + ": " + msg + " at offset " + std::to_string(at));
  }

  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

 private:
  std::string what_;
};

struct ParsedWav {
  WavInfo info;
  std::size_t data_offset = 0;
  std::uint16_t bits = 0;
};

ParsedWav parse_wav_header(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  Reader<ParseError> r(bytes, "wav " + name);
  if (r.str(4) != "RIFF") r.fail("missing RIFF tag", 0);
  const std::uint32_t riff_size = r.u32();
  if (static_cast<std::size_t>(riff_size) + 8 != bytes.size()) {
    r.fail("RIFF size " + std::to_string(riff_size) + " disagrees with file length " +
               std::to_string(bytes.size()),
           4);
  }
  if (r.str(4) != "WAVE") r.fail("missing WAVE tag", 8);
  ParsedWav p;
  bool have_fmt = false, have_data = false;
  std::uint16_t tag = 0, block_align = 0;
  while (r.pos < bytes.size()) {
    const std::size_t chunk_at = r.pos;
    const std::string id = r.str(4);
    const std::uint32_t size = r.u32();
    const std::size_t body = r.pos;
    const std::size_t padded = size + (size & 1u);
    if (body + size > bytes.size()) r.fail("chunk '" + id + "' overruns the file", chunk_at);
    if (id == "fmt ") {
      if (size < 16) r.fail("fmt chunk too short", chunk_at);
      tag = r.u16();
      const std::uint16_t channels = r.u16();
      const std::uint32_t rate = r.u32();
      r.u32();  // byte rate
      block_align = r.u16();
      p.bits = r.u16();
      if (tag == kFormatExtensible) {
        if (size < 40) r.fail("extensible fmt chunk too short", chunk_at);
        r.u16();  // cbSize
        r.u16();  // valid bits
        r.u32();  // channel mask
        tag = r.u16();  // first two bytes of the subformat GUID
      }
      if (channels == 0) r.fail("zero channels", chunk_at + 10);
      if (rate == 0) r.fail("zero sample rate", chunk_at + 12);
      p.info.channels = channels;
      p.info.sample_rate_hz = static_cast<int>(rate);
      if (tag == kFormatPcm && p.bits == 16) {
        p.info.format = SampleFormat::Pcm16;
      } else if (tag == kFormatFloat && p.bits == 32) {
        p.info.format = SampleFormat::Float32;
      } else {
        r.fail("unsupported codec (format " + std::to_string(tag) + ", " + std::to_string(p.bits) +
                   " bits)",
               chunk_at + 8);
      }
      if (block_align != channels * (p.bits / 8)) r.fail("inconsistent block align", chunk_at + 20);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) r.fail("data chunk before fmt chunk", chunk_at);
      if (size % block_align != 0) r.fail("data size is not a whole number of frames", chunk_at + 4);
      p.info.frames = size / block_align;
      p.data_offset = body;
      have_data = true;
    }
    if (body + padded > bytes.size() && body + size != bytes.size()) {
      r.fail("chunk '" + id + "' padding overruns the file", chunk_at);
    }
    r.pos = std::min(body + padded, bytes.size());
  }
  if (!have_fmt) r.fail("no fmt chunk", bytes.size());
  if (!have_data) r.fail("no data chunk", bytes.size());
  return p;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(kModule, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(kModule, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::vector<std::uint8_t> encode_wav(const Waveform& w, SampleFormat format) {
  w.validate();
  if (w.channels() == 0 || w.channels() > 65535) {
    throw ContractError(kModule, "wav: channel count must be in [1, 65535]");
  }
  const std::size_t bytes_per = format == SampleFormat::Pcm16 ? 2 : 4;
  const std::size_t data_size = w.length() * w.channels() * bytes_per;
  Writer o;
  o.tag("RIFF");
  o.u32(static_cast<std::uint32_t>(36 + data_size + (data_size & 1u)));
  o.tag("WAVE");
  o.tag("fmt ");
  o.u32(16);
  o.u16(format == SampleFormat::Pcm16 ? kFormatPcm : kFormatFloat);
  o.u16(static_cast<std::uint16_t>(w.channels()));
  o.u32(static_cast<std::uint32_t>(w.sample_rate_hz));
  o.u32(static_cast<std::uint32_t>(w.sample_rate_hz * w.channels() * bytes_per));
  o.u16(static_cast<std::uint16_t>(w.channels() * bytes_per));
  o.u16(static_cast<std::uint16_t>(bytes_per * 8));
  o.tag("data");
  o.u32(static_cast<std::uint32_t>(data_size));
  o.out.reserve(o.out.size() + data_size);
  for (std::size_t i = 0; i < w.length(); ++i) {
    for (std::size_t c = 0; c < w.channels(); ++c) {
      const double x = w.samples[c][i];
      if (format == SampleFormat::Pcm16) {
        const double q = std::clamp(std::round(x * 32768.0), -32768.0, 32767.0);
        o.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
      } else {
        o.f32(static_cast<float>(x));
      }
    }
  }
  return o.out;
}

namespace {

Waveform decode_wav_named(const std::vector<std::uint8_t>& bytes, const std::string& name, WavInfo* info) {
  const ParsedWav p = parse_wav_header(bytes, name);
  Waveform w(p.info.channels, p.info.frames, p.info.sample_rate_hz);
  Reader<ParseError> r(bytes, "wav " + name);
  r.pos = p.data_offset;
  for (std::size_t i = 0; i < p.info.frames; ++i) {
    for (std::size_t c = 0; c < p.info.channels; ++c) {
      if (p.info.format == SampleFormat::Pcm16) {
        w.samples[c][i] = static_cast<std::int16_t>(r.u16()) / 32768.0;
      } else {
        w.samples[c][i] = r.f32();
      }
    }
  }
  if (info) *info = p.info;
  return w;
}

}  // namespace

Waveform decode_wav(const std::vector<std::uint8_t>& bytes, WavInfo* info) {
  return decode_wav_named(bytes, "buffer", info);
}

Waveform read_wav(const std::filesystem::path& path) {
  return decode_wav_named(read_file(path), path.string(), nullptr);
}

WavInfo read_wav_info(const std::filesystem::path& path) {
  return parse_wav_header(read_file(path), path.string()).info;
}

void write_wav(const Waveform& w, const std::filesystem::path& path, SampleFormat format) {
  write_file(path, encode_wav(w, format));
}

std::string to_string(Field f) {
  switch (f) {
    case Field::Near: return "near";
    case Field::Mid: return "mid";
    case Field::Far: return "far";
  }
  return "far";
}

Field parse_field(const std::string& s) {
  if (s == "near") return Field::Near;
  if (s == "mid") return Field::Mid;
  if (s == "far") return Field::Far;
  throw ParseError(kModule, "unknown field tag '" + s + "' (expected near, mid or far)");
}

std::size_t field_channels(Field f) {
  switch (f) {
    case Field::Near: return 1;
    case Field::Mid: return 2;
    case Field::Far: return 6;
  }
  return 6;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, bool check_audio) {
  std::ifstream in(path);
  if (!in) throw IoError(kModule, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = path.string() + " line " + std::to_string(lineno) + ": ";
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(kModule, where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(kModule, where + "record must be an object");
    for (const char* key : {"id", "audio", "label", "field"}) {
      if (!j.contains(key)) throw ParseError(kModule, where + "missing field '" + key + "'");
    }
    ManifestEntry e;
    if (!j["id"].is_string() || j["id"].get<std::string>().empty()) {
      throw ParseError(kModule, where + "'id' must be a non-empty string");
    }
    e.id = j["id"].get<std::string>();
    if (!ids.insert(e.id).second) throw ParseError(kModule, where + "duplicate id '" + e.id + "'");
    if (!j["label"].is_number_integer() || (j["label"] != 0 && j["label"] != 1)) {
      throw ParseError(kModule, where + "'label' must be 0 or 1, got " + j["label"].dump());
    }
    e.label = j["label"].get<int>();
    if (!j["field"].is_string()) throw ParseError(kModule, where + "'field' must be a string");
    try {
      e.field = parse_field(j["field"].get<std::string>());
    } catch (const ParseError& err) {
      throw ParseError(kModule, where + err.what());
    }
    const auto& audio = j["audio"];
    std::vector<std::string> paths;
    if (audio.is_string()) {
      paths.push_back(audio.get<std::string>());
    } else if (audio.is_array() && !audio.empty()) {
      for (const auto& a : audio) {
        if (!a.is_string()) throw ParseError(kModule, where + "'audio' list entries must be strings");
        paths.push_back(a.get<std::string>());
      }
    } else {
      throw ParseError(kModule, where + "'audio' must be a path or a non-empty list of paths");
    }
    for (const auto& p : paths) {
      std::filesystem::path fp(p);
      e.audio.push_back(fp.is_absolute() ? fp : base / fp);
    }
    if (check_audio) {
      std::size_t channels = 0;
      for (const auto& p : e.audio) {
        if (!std::filesystem::exists(p)) throw ParseError(kModule, where + "audio file not found: " + p.string());
        const auto info = read_wav_info(p);
        if (e.audio.size() > 1 && info.channels != 1) {
          throw ParseError(kModule, where + "per-channel audio must be mono: " + p.string());
        }
        channels += info.channels;
      }
      if (channels != field_channels(e.field)) {
        throw ParseError(kModule, where + "field '" + to_string(e.field) + "' expects " +
                                      std::to_string(field_channels(e.field)) + " channels, audio has " +
                                      std::to_string(channels));
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  std::string text;
  for (const auto& e : entries) {
    nlohmann::json j;
    j["id"] = e.id;
    auto rel = [&](const std::filesystem::path& p) {
      return p.is_absolute() ? std::filesystem::relative(p, std::filesystem::absolute(base)).generic_string()
                             : p.generic_string();
    };
    if (e.audio.size() == 1) {
      j["audio"] = rel(e.audio[0]);
    } else {
      j["audio"] = nlohmann::json::array();
      for (const auto& p : e.audio) j["audio"].push_back(rel(p));
    }
    j["label"] = e.label;
    j["field"] = to_string(e.field);
    text += j.dump() + "\n";
  }
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

Waveform load_entry_audio(const ManifestEntry& e) {
  if (e.audio.empty()) throw ContractError(kModule, "entry '" + e.id + "' has no audio");
  Waveform out = read_wav(e.audio[0]);
  for (std::size_t i = 1; i < e.audio.size(); ++i) {
    Waveform ch = read_wav(e.audio[i]);
    if (ch.sample_rate_hz != out.sample_rate_hz || ch.length() != out.length()) {
      throw ContractError(kModule, "entry '" + e.id + "': per-channel files differ in rate or length");
    }
    for (auto& s : ch.samples) out.samples.push_back(std::move(s));
  }
  return out;
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  Writer o;
  o.tag("KWSM");
  o.u32(kCheckpointVersion);
  const std::string meta = c.meta.dump();
  o.u32(static_cast<std::uint32_t>(meta.size()));
  o.bytes(meta.data(), meta.size());
  o.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.values.size()) {
      throw ContractError(kModule, "checkpoint: tensor '" + t.name + "' shape does not match its values");
    }
    o.u32(static_cast<std::uint32_t>(t.name.size()));
    o.bytes(t.name.data(), t.name.size());
    o.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) o.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values) o.f32(v);
  }
  const auto crc = crc32(0L, o.out.data(), static_cast<uInt>(o.out.size()));
  o.u32(static_cast<std::uint32_t>(crc));
  return o.out;
}

namespace {

Checkpoint decode_checkpoint_named(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  Reader<FormatError> r(bytes, name);
  if (r.str(4) != "KWSM") r.fail("bad magic", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " +
               std::to_string(kCheckpointVersion) + ")",
           4);
  }
  if (bytes.size() < 12) r.fail("too short", 0);
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (crc != stored) r.fail("checksum mismatch", body);

  Checkpoint c;
  const std::size_t meta_at = r.pos;
  const std::uint32_t meta_len = r.u32();
  if (r.pos + meta_len > body) r.fail("metadata length overruns the payload", meta_at);
  try {
    c.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("metadata is not valid JSON (") + e.what() + ")", meta_at + 4);
  }
  const std::uint32_t count = r.u32();
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos;
    NamedTensor t;
    const std::uint32_t name_len = r.u32();
    if (r.pos + name_len > body) r.fail("tensor name length overruns the payload", at);
    t.name = r.str(name_len);
    if (!names.insert(t.name).second) r.fail("duplicate tensor '" + t.name + "'", at);
    const std::uint32_t rank = r.u32();
    if (r.pos + 4ull * rank > body) r.fail("tensor rank overruns the payload", at);
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.u32());
      n *= t.shape.back();
    }
    if (r.pos + 4ull * n > body) r.fail("tensor '" + t.name + "' values overrun the payload", at);
    t.values.resize(n);
    for (auto& v : t.values) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  if (r.pos != body) r.fail(std::to_string(body - r.pos) + " trailing bytes", r.pos);
  return c;
}

}  // namespace

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  return decode_checkpoint_named(bytes, "checkpoint");
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint_named(read_file(path), "checkpoint " + path.string());
}

std::string rng_state(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream s(state);
  s >> rng;
  if (!s) throw FormatError(kModule, "invalid RNG state");
  return rng;
}

}  // namespace kws::io
