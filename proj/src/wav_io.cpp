#include "dspast/wav_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace dspast {

namespace {

void put_u32(std::vector<char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::vector<char>& b, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}
std::uint16_t get_u16(const char* p) {
  std::uint16_t v;
  std::memcpy(&v, p, 2);
  return v;
}

}  // namespace

void write_wav(const std::string& path, const StereoClip& clip) {
  clip.validate();
  const std::uint32_t n = static_cast<std::uint32_t>(clip.left.size());
  const std::uint32_t data_bytes = n * 2 * 4;

  std::vector<char> hdr;
  hdr.insert(hdr.end(), {'R', 'I', 'F', 'F'});
  put_u32(hdr, 36 + data_bytes);
  hdr.insert(hdr.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(hdr, 16);
  put_u16(hdr, 3);  // IEEE float
  put_u16(hdr, 2);  // channels
  put_u32(hdr, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(hdr, static_cast<std::uint32_t>(clip.sample_rate) * 2 * 4);  // byte rate
  put_u16(hdr, 8);   // block align
  put_u16(hdr, 32);  // bits per sample
  hdr.insert(hdr.end(), {'d', 'a', 't', 'a'});
  put_u32(hdr, data_bytes);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  std::vector<float> interleaved(static_cast<std::size_t>(n) * 2);
  for (std::uint32_t i = 0; i < n; ++i) {
    interleaved[2 * i] = clip.left[i];
    interleaved[2 * i + 1] = clip.right[i];
  }
  f.write(reinterpret_cast<const char*>(interleaved.data()), static_cast<std::streamsize>(data_bytes));
  if (!f) throw IoError("write failed: " + path);
}

StereoClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw IoError("not a RIFF/WAVE file: " + path);

  StereoClip clip;
  std::size_t pos = 12;
  bool have_fmt = false, have_data = false;
  std::uint16_t channels = 0;
  while (pos + 8 <= bytes.size()) {
    const char* tag = bytes.data() + pos;
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const char* body = bytes.data() + pos + 8;
    if (pos + 8 + size > bytes.size()) throw IoError("truncated chunk in " + path);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (get_u16(body) != 3 || get_u16(body + 14) != 32)
        throw IoError("expected 32-bit float WAV: " + path);
      channels = get_u16(body + 2);
      if (channels != 2) throw IoError("expected 2 channels: " + path);
      clip.sample_rate = get_u32(body + 4);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw IoError("data chunk before fmt in " + path);
      const std::uint32_t n = size / 8;
      clip.left.resize(n);
      clip.right.resize(n);
      const float* samples = reinterpret_cast<const float*>(body);
      for (std::uint32_t i = 0; i < n; ++i) {
        clip.left[i] = samples[2 * i];
        clip.right[i] = samples[2 * i + 1];
      }
      have_data = true;
    }
    pos += 8 + size + (size & 1);
  }
  if (!have_data) throw IoError("no data chunk in " + path);
  return clip;
}

}  // namespace dspast
