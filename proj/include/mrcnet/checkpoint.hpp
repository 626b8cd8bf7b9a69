#pragma once

#include <fstream>
#include <string>

#include "mrcnet/optim.hpp"
#include "mrcnet/param.hpp"

namespace mrc {

// Checkpoint framing: "MRCD", u32 version, length-prefixed config JSON,
// count-prefixed (name, tensor) parameter list, count-prefixed buffer list
// (batch-norm running statistics), then an optional optimizer section (step
// count plus per-parameter first/second moments).

inline constexpr u32 kCheckpointFormatVersion = 1;

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  u64 len = read_u64(is);
  std::string s(static_cast<size_t>(len), '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated string in checkpoint");
  return s;
}

inline void read_checkpoint_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MRCD", 4) != 0) throw IoError("bad checkpoint magic");
  u32 version = read_u32(is);
  if (version != kCheckpointFormatVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     ParamStore<T>& params, BufferStore<T>& buffers, AdamW<T>* opt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write("MRCD", 4);
  detail::write_u32(os, kCheckpointFormatVersion);
  detail::write_string(os, config_json);
  detail::write_u64(os, params.size());
  for (auto* p : params.items()) {
    detail::write_string(os, p->name);
    write_tensor(os, p->value);
  }
  detail::write_u64(os, buffers.size());
  for (auto& [name, t] : buffers.items()) {
    detail::write_string(os, name);
    write_tensor(os, *t);
  }
  os.put(opt ? 1 : 0);
  if (opt) {
    detail::write_u64(os, static_cast<u64>(opt->step_count()));
    detail::write_u64(os, params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      detail::write_string(os, params.items()[i]->name);
      write_tensor(os, opt->moment1()[i]);
      write_tensor(os, opt->moment2()[i]);
    }
  }
  if (!os) throw IoError("failed to write checkpoint '" + path + "'");
}

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     ParamStore<T>& params, BufferStore<T>& buffers) {
  save_checkpoint<T>(path, config_json, params, buffers, nullptr);
}

inline std::string read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  detail::read_checkpoint_header(is);
  return detail::read_string(is);
}

// Loads parameters (and, when present and requested, optimizer state) into an
// already-constructed model whose parameter names and shapes must match.
// Returns the stored config JSON.
template <typename T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& params,
                            BufferStore<T>& buffers, AdamW<T>* opt = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  detail::read_checkpoint_header(is);
  std::string config_json = detail::read_string(is);
  const u64 count = detail::read_u64(is);
  if (count != params.size())
    throw IoError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                  std::to_string(params.size()));
  for (u64 i = 0; i < count; ++i) {
    const std::string name = detail::read_string(is);
    Tensor<T> t = read_tensor<T>(is);
    ParamTensor<T>* p = params.items()[static_cast<size_t>(i)];
    if (p->name != name)
      throw IoError("checkpoint parameter '" + name + "' does not match model parameter '" +
                    p->name + "' at position " + std::to_string(i));
    if (t.shape() != p->value.shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " +
                    shape_str(t.shape()) + ", model expects " +
                    shape_str(p->value.shape()));
    p->value = std::move(t);
  }
  const u64 bcount = detail::read_u64(is);
  if (bcount != buffers.size()) throw IoError("checkpoint buffer count mismatch");
  for (u64 i = 0; i < bcount; ++i) {
    const std::string name = detail::read_string(is);
    Tensor<T> t = read_tensor<T>(is);
    auto& [bname, bt] = buffers.items()[static_cast<size_t>(i)];
    if (bname != name)
      throw IoError("checkpoint buffer '" + name + "' does not match model buffer '" +
                    bname + "'");
    *bt = std::move(t);
  }
  const int has_opt = is.get();
  if (has_opt == 1 && opt) {
    opt->set_step_count(static_cast<i64>(detail::read_u64(is)));
    const u64 n = detail::read_u64(is);
    if (n != params.size()) throw IoError("optimizer state count mismatch");
    for (u64 i = 0; i < n; ++i) {
      detail::read_string(is);  // name, position already pinned above
      opt->moment1()[static_cast<size_t>(i)] = read_tensor<T>(is);
      opt->moment2()[static_cast<size_t>(i)] = read_tensor<T>(is);
    }
  }
  return config_json;
}

}  // namespace mrc
