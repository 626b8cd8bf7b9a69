#include "mrcnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mrc {

// --- PPM ------------------------------------------------------------------

void write_ppm(const std::string& path, const ImageU8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw IoError("failed to write image '" + path + "'");
}

ImageU8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image '" + path + "'");
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("'" + path + "' is not a binary PPM");
  i64 w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("unsupported PPM header in '" + path + "'");
  is.get();  // single whitespace after header
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(3 * w * h));
  is.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw IoError("truncated PPM payload in '" + path + "'");
  return img;
}

// --- rendering ---------------------------------------------------------------

namespace {

struct Rgb {
  int r, g, b;
};

inline std::uint8_t clamp_u8(int v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

void put(ImageU8& img, i64 x, i64 y, Rgb c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  std::uint8_t* p = img.px(x, y);
  p[0] = clamp_u8(c.r);
  p[1] = clamp_u8(c.g);
  p[2] = clamp_u8(c.b);
}

struct Region {
  i64 x0, y0, x1, y1;
  bool vertical;                            // lanes run along y when true
  std::vector<std::pair<i64, i64>> lanes;   // (start, width) in the cross axis

  i64 u0() const { return vertical ? x0 : y0; }
  i64 u1() const { return vertical ? x1 : y1; }
  i64 v0() const { return vertical ? y0 : x0; }
  i64 v1() const { return vertical ? y1 : x1; }
  // (u, v) -> pixel: u indexes across lanes, v along them
  std::pair<i64, i64> xy(i64 u, i64 v) const {
    return vertical ? std::make_pair(u, v) : std::make_pair(v, u);
  }
};

// Painted-pixel mask of a single defect, re-scanned for the tight box.
struct DefectMask {
  std::vector<std::pair<i64, i64>> pixels;

  void add(i64 x, i64 y) { pixels.emplace_back(x, y); }

  Box tight_box() const {
    i64 minx = 1 << 20, miny = 1 << 20, maxx = -1, maxy = -1;
    for (auto [x, y] : pixels) {
      minx = std::min(minx, x);
      miny = std::min(miny, y);
      maxx = std::max(maxx, x);
      maxy = std::max(maxy, y);
    }
    return Box{static_cast<double>(minx), static_cast<double>(miny),
               static_cast<double>(maxx + 1), static_cast<double>(maxy + 1)};
  }
};

struct Occupancy {
  i64 size;
  std::vector<bool> grid;

  explicit Occupancy(i64 s) : size(s), grid(static_cast<size_t>(s * s), false) {}

  bool free_box(i64 x0, i64 y0, i64 x1, i64 y1, i64 margin) const {
    if (x0 - margin < 1 || y0 - margin < 1 || x1 + margin > size - 1 ||
        y1 + margin > size - 1)
      return false;
    for (i64 y = y0 - margin; y < y1 + margin; ++y)
      for (i64 x = x0 - margin; x < x1 + margin; ++x)
        if (grid[static_cast<size_t>(y * size + x)]) return false;
    return true;
  }

  void claim(i64 x0, i64 y0, i64 x1, i64 y1, i64 margin) {
    for (i64 y = std::max<i64>(0, y0 - margin); y < std::min(size, y1 + margin); ++y)
      for (i64 x = std::max<i64>(0, x0 - margin); x < std::min(size, x1 + margin); ++x)
        grid[static_cast<size_t>(y * size + x)] = true;
  }
};

void draw_disk(ImageU8& img, DefectMask& mask, i64 cx, i64 cy, i64 r, Rgb color) {
  for (i64 y = cy - r; y <= cy + r; ++y)
    for (i64 x = cx - r; x <= cx + r; ++x) {
      const i64 dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > r * r) continue;
      if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
      put(img, x, y, color);
      mask.add(x, y);
    }
}

void render_lanes(ImageU8& img, Region& reg, Rgb trace, Rng& rng) {
  i64 u = reg.u0() + rng.uniform_int(1, 3);
  while (true) {
    const i64 w = rng.uniform_int(2, 3);
    if (u + w > reg.u1() - 1) break;
    const int jitter = static_cast<int>(rng.uniform_int(-10, 10));
    Rgb c{trace.r + jitter, trace.g + jitter, trace.b + jitter / 2};
    for (i64 ui = u; ui < u + w; ++ui)
      for (i64 v = reg.v0(); v < reg.v1(); ++v) {
        auto [x, y] = reg.xy(ui, v);
        put(img, x, y, c);
      }
    reg.lanes.emplace_back(u, w);
    u += w + rng.uniform_int(3, 5);
  }
}

// short: a bright bridge with blob ends spanning the gap between two
// adjacent lanes
bool place_short(ImageU8& img, Region& reg, Occupancy& occ, Rng& rng, Rgb trace,
                 DefectMask& mask) {
  if (reg.lanes.size() < 2) return false;
  const Rgb bright{trace.r + 55, trace.g + 45, trace.b + 30};
  for (int attempt = 0; attempt < 40; ++attempt) {
    const size_t li = static_cast<size_t>(
        rng.uniform_int(0, static_cast<i64>(reg.lanes.size()) - 2));
    const i64 ua = reg.lanes[li].first + reg.lanes[li].second;  // inner edge of lane A
    const i64 ub = reg.lanes[li + 1].first;                     // inner edge of lane B
    const i64 vlen = reg.v1() - reg.v0();
    if (vlen < 12) return false;
    const i64 vc = reg.v0() + rng.uniform_int(5, vlen - 6);
    const i64 blob = 2;
    auto [ax, ay] = reg.xy(ua - 1, vc);
    auto [bx, by] = reg.xy(ub, vc);
    const i64 x0 = std::min(ax, bx) - blob, x1 = std::max(ax, bx) + blob + 1;
    const i64 y0 = std::min(ay, by) - blob, y1 = std::max(ay, by) + blob + 1;
    if (!occ.free_box(x0, y0, x1, y1, 2)) continue;

    const i64 thick = rng.uniform_int(1, 2);
    for (i64 u = ua; u < ub; ++u)
      for (i64 v = vc - thick / 2; v <= vc + (thick - 1) / 2; ++v) {
        auto [x, y] = reg.xy(u, v);
        put(img, x, y, bright);
        mask.add(x, y);
      }
    draw_disk(img, mask, ax, ay, blob, bright);
    draw_disk(img, mask, bx, by, blob, bright);
    Box b = mask.tight_box();
    occ.claim(static_cast<i64>(b.x1), static_cast<i64>(b.y1), static_cast<i64>(b.x2),
              static_cast<i64>(b.y2), 2);
    return true;
  }
  return false;
}

// open: a dark overcut gap severing one lane
bool place_open(ImageU8& img, Region& reg, Occupancy& occ, Rng& rng, Rgb substrate,
                DefectMask& mask) {
  if (reg.lanes.empty()) return false;
  const Rgb dark{substrate.r - 10, substrate.g - 26, substrate.b - 14};
  for (int attempt = 0; attempt < 40; ++attempt) {
    const size_t li = static_cast<size_t>(
        rng.uniform_int(0, static_cast<i64>(reg.lanes.size()) - 1));
    const auto [lu, lw] = reg.lanes[li];
    const i64 vlen = reg.v1() - reg.v0();
    if (vlen < 14) return false;
    const i64 len = rng.uniform_int(4, 6);
    const i64 vc = reg.v0() + rng.uniform_int(4, vlen - len - 4);
    const i64 over = 2;
    auto [ax, ay] = reg.xy(lu - over, vc);
    auto [bx, by] = reg.xy(lu + lw - 1 + over, vc + len - 1);
    const i64 x0 = std::min(ax, bx), x1 = std::max(ax, bx) + 1;
    const i64 y0 = std::min(ay, by), y1 = std::max(ay, by) + 1;
    if (!occ.free_box(x0, y0, x1, y1, 2)) continue;

    for (i64 u = lu - over; u < lu + lw + over; ++u)
      for (i64 v = vc; v < vc + len; ++v) {
        auto [x, y] = reg.xy(u, v);
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
        put(img, x, y, dark);
        mask.add(x, y);
      }
    Box b = mask.tight_box();
    occ.claim(static_cast<i64>(b.x1), static_cast<i64>(b.y1), static_cast<i64>(b.x2),
              static_cast<i64>(b.y2), 2);
    return true;
  }
  return false;
}

// circle: a bright annular pad with its dark drill hole rendered off-center
bool place_circle(ImageU8& img, Occupancy& occ, Rng& rng, DefectMask& mask) {
  const Rgb pad{208, 172, 84};
  const Rgb hole{22, 22, 26};
  for (int attempt = 0; attempt < 40; ++attempt) {
    const i64 rout = rng.uniform_int(4, 6);
    const i64 cx = rng.uniform_int(rout + 2, img.width - rout - 3);
    const i64 cy = rng.uniform_int(rout + 2, img.height - rout - 3);
    if (!occ.free_box(cx - rout, cy - rout, cx + rout + 1, cy + rout + 1, 2)) continue;

    const i64 rin = rout - 2;
    for (i64 y = cy - rout; y <= cy + rout; ++y)
      for (i64 x = cx - rout; x <= cx + rout; ++x) {
        const i64 d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        if (d2 > rout * rout || d2 < rin * rin) continue;
        put(img, x, y, pad);
        mask.add(x, y);
      }
    const i64 off = rng.uniform_int(1, 2);
    const i64 dir = rng.uniform_int(0, 3);
    const i64 hx = cx + (dir == 0 ? off : dir == 1 ? -off : 0);
    const i64 hy = cy + (dir == 2 ? off : dir == 3 ? -off : 0);
    draw_disk(img, mask, hx, hy, rng.uniform_int(1, 2), hole);
    Box b = mask.tight_box();
    occ.claim(static_cast<i64>(b.x1), static_cast<i64>(b.y1), static_cast<i64>(b.x2),
              static_cast<i64>(b.y2), 2);
    return true;
  }
  return false;
}

ImageRecord render_image(const GenConfig& cfg, u64 image_seed, const std::string& name,
                         ImageU8& img) {
  Rng rng(image_seed);
  const i64 S = cfg.image_size;
  img.width = S;
  img.height = S;
  img.rgb.assign(static_cast<size_t>(3 * S * S), 0);

  const int tint = static_cast<int>(rng.uniform_int(-6, 6));
  const Rgb substrate{16 + tint, 64 + tint, 36 + tint / 2};
  const Rgb trace{176 + tint, 124 + tint, 58 + tint / 2};
  for (i64 y = 0; y < S; ++y)
    for (i64 x = 0; x < S; ++x) put(img, x, y, substrate);

  // layout: one full-frame lane field, or a Manhattan split into two fields
  // with perpendicular orientations
  std::vector<Region> regions;
  const bool manhattan = rng.bernoulli(0.35);
  if (manhattan) {
    const bool split_x = rng.bernoulli(0.5);
    const i64 cut = rng.uniform_int(S * 2 / 5, S * 3 / 5);
    if (split_x) {
      regions.push_back({0, 0, cut, S, true, {}});
      regions.push_back({cut + 2, 0, S, S, false, {}});
    } else {
      regions.push_back({0, 0, S, cut, false, {}});
      regions.push_back({0, cut + 2, S, S, true, {}});
    }
  } else {
    regions.push_back({0, 0, S, S, rng.bernoulli(0.5), {}});
  }
  for (Region& r : regions) render_lanes(img, r, trace, rng);

  Occupancy occ(S);
  ImageRecord rec;
  rec.image = name;
  rec.width = S;
  rec.height = S;

  for (int cls = 0; cls < 3; ++cls) {
    if (!rng.bernoulli(cfg.class_image_freq[static_cast<size_t>(cls)])) continue;
    i64 n = 1 + rng.poisson(std::max(0.0, cfg.defects_per_image[static_cast<size_t>(cls)] - 1.0));
    n = std::min(n, cfg.max_defects_per_class);
    for (i64 k = 0; k < n; ++k) {
      DefectMask mask;
      bool ok = false;
      if (cls == 0) {
        Region& reg = regions[static_cast<size_t>(
            rng.uniform_int(0, static_cast<i64>(regions.size()) - 1))];
        ok = place_short(img, reg, occ, rng, trace, mask);
      } else if (cls == 1) {
        Region& reg = regions[static_cast<size_t>(
            rng.uniform_int(0, static_cast<i64>(regions.size()) - 1))];
        ok = place_open(img, reg, occ, rng, substrate, mask);
      } else {
        ok = place_circle(img, occ, rng, mask);
      }
      if (!ok) continue;
      const Box box = mask.tight_box();
      // tight-box invariant: the annotation is exactly the rescanned extent
      for (auto [x, y] : mask.pixels) {
        if (x < static_cast<i64>(box.x1) || x >= static_cast<i64>(box.x2) ||
            y < static_cast<i64>(box.y1) || y >= static_cast<i64>(box.y2))
          throw Error("generator: defect pixel escaped its annotation box");
      }
      rec.annotations.push_back({kDefaultClasses[static_cast<size_t>(cls)], box});
    }
  }

  // mild sensor noise, applied last so annotations track painted geometry
  for (i64 y = 0; y < S; ++y)
    for (i64 x = 0; x < S; ++x) {
      std::uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c)
        p[c] = clamp_u8(static_cast<int>(p[c]) + static_cast<int>(rng.uniform_int(-6, 6)));
    }
  return rec;
}

}  // namespace

DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "': " + ec.message());
  {
    const std::string probe = out_dir + "/.write_probe";
    std::ofstream os(probe);
    if (!os) throw IoError("output directory '" + out_dir + "' is not writable");
    os.close();
    fs::remove(probe, ec);
  }

  DatasetManifest m;
  m.seed = cfg.seed;
  m.image_size = cfg.image_size;
  for (i64 i = 0; i < cfg.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05lld.ppm", static_cast<long long>(i));
    ImageU8 img;
    ImageRecord rec = render_image(cfg, derive_seed(cfg.seed, static_cast<u64>(i)), name, img);
    write_ppm(out_dir + "/" + rec.image, img);
    m.records.push_back(std::move(rec));
  }

  // split tags: seeded shuffle then prefix cut
  std::vector<size_t> order(m.records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, 0x5317eULL));
  split_rng.shuffle(order.begin(), order.end());
  const i64 n_train =
      static_cast<i64>(std::floor(cfg.train_frac * static_cast<double>(cfg.count) + 0.5));
  for (size_t k = 0; k < order.size(); ++k)
    m.records[order[k]].split = static_cast<i64>(k) < n_train ? "train" : "val";

  save_manifest(m, out_dir + "/manifest.jsonl");
  return m;
}

// --- manifest I/O -------------------------------------------------------------

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  ordered_json meta;
  meta["classes"] = m.classes;
  meta["seed"] = m.seed;
  meta["image_size"] = m.image_size;
  os << meta.dump() << "\n";
  for (const ImageRecord& r : m.records) {
    ordered_json j;
    j["image"] = r.image;
    j["width"] = r.width;
    j["height"] = r.height;
    j["split"] = r.split;
    ordered_json anns = ordered_json::array();
    for (const Annotation& a : r.annotations) {
      ordered_json aj;
      aj["class"] = a.class_name;
      aj["box"] = {a.box.x1, a.box.y1, a.box.x2, a.box.y2};
      anns.push_back(aj);
    }
    j["annotations"] = anns;
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("failed to write manifest '" + path + "'");
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest '" + path + "'");
  const std::string dir = fs::path(path).parent_path().string();
  DatasetManifest m;
  std::string line;
  i64 lineno = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw IoError("manifest " + path + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      fail(std::string("parse error: ") + e.what());
    }
    if (lineno == 1) {
      if (!j.contains("classes")) fail("first line must carry the class list");
      m.classes = j.at("classes").get<std::vector<std::string>>();
      m.seed = j.value("seed", u64{0});
      m.image_size = j.value("image_size", i64{0});
      continue;
    }
    ImageRecord r;
    try {
      r.image = j.at("image").get<std::string>();
      r.width = j.at("width").get<i64>();
      r.height = j.at("height").get<i64>();
      r.split = j.at("split").get<std::string>();
      for (const auto& aj : j.at("annotations")) {
        Annotation a;
        a.class_name = aj.at("class").get<std::string>();
        const auto& bx = aj.at("box");
        if (bx.size() != 4) fail("box must have 4 coordinates");
        a.box = Box{bx[0].get<double>(), bx[1].get<double>(), bx[2].get<double>(),
                    bx[3].get<double>()};
        r.annotations.push_back(std::move(a));
      }
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      fail(std::string("bad record: ") + e.what());
    }
    if (r.width <= 0 || r.height <= 0) fail("non-positive image extents");
    if (r.split != "train" && r.split != "val") fail("split must be 'train' or 'val'");
    for (const Annotation& a : r.annotations) {
      if (m.class_id(a.class_name) < 0) fail("unknown class '" + a.class_name + "'");
      if (!(a.box.x2 > a.box.x1) || !(a.box.y2 > a.box.y1))
        fail("degenerate box (x2 <= x1 or y2 <= y1)");
      if (a.box.x1 < 0 || a.box.y1 < 0 || a.box.x2 > static_cast<double>(r.width) ||
          a.box.y2 > static_cast<double>(r.height))
        fail("box outside image bounds");
    }
    const std::string img_path = dir.empty() ? r.image : dir + "/" + r.image;
    if (!fs::exists(img_path)) fail("referenced image '" + r.image + "' does not exist");
    m.records.push_back(std::move(r));
  }
  if (lineno == 0) throw IoError("manifest " + path + " is empty");
  return m;
}

std::pair<DatasetManifest, DatasetManifest> split_manifest(const DatasetManifest& m,
                                                           double train_frac, u64 seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw ConfigError("split: train fraction must lie in (0,1)");
  std::vector<size_t> order(m.records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5317eULL));
  rng.shuffle(order.begin(), order.end());
  const i64 n_train = static_cast<i64>(
      std::floor(train_frac * static_cast<double>(m.records.size()) + 0.5));
  DatasetManifest train = m, val = m;
  train.records.clear();
  val.records.clear();
  for (size_t k = 0; k < order.size(); ++k) {
    ImageRecord r = m.records[order[k]];
    if (static_cast<i64>(k) < n_train) {
      r.split = "train";
      train.records.push_back(std::move(r));
    } else {
      r.split = "val";
      val.records.push_back(std::move(r));
    }
  }
  return {std::move(train), std::move(val)};
}

}  // namespace mrc
