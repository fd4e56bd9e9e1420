#include "semfl/data/loaders.hpp"

#include <algorithm>
#include <array>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <curl/curl.h>
#include <jpeglib.h>
#include <zlib.h>

#include "semfl/common/error.hpp"
#include "semfl/common/hash.hpp"

namespace fs = std::filesystem;

namespace semfl::data {
namespace {

constexpr std::size_t kCifarPixels = 3072;

const std::vector<std::string>& cifar10_names() {
  static const std::vector<std::string> names{"airplane", "automobile", "bird",  "cat",  "deer",
                                              "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProviderError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append_cifar_file(Dataset& ds, const fs::path& file, std::size_t label_bytes, std::size_t label_pos) {
  auto bytes = read_bytes(file);
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.size() % record != 0) throw FormatError(file.string() + ": size is not a whole number of records");
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    ds.labels.push_back(bytes[off + label_pos]);
    ds.pixels.insert(ds.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + label_bytes),
                     bytes.begin() + static_cast<std::ptrdiff_t>(off + record));
  }
}

// Rejects absolute paths and parent references inside archives.
fs::path safe_join(const fs::path& dest, const std::string& name) {
  fs::path rel(name);
  if (rel.is_absolute()) throw FormatError("archive entry has an absolute path: " + name);
  for (const auto& part : rel) {
    if (part == "..") throw FormatError("archive entry escapes the destination: " + name);
  }
  return dest / rel;
}

std::uint64_t parse_octal(const char* p, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n && p[i]; ++i) {
    if (p[i] == ' ') continue;
    if (p[i] < '0' || p[i] > '7') break;
    v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
  }
  return v;
}

struct GzReader {
  gzFile f;
  explicit GzReader(const fs::path& p) : f(gzopen(p.c_str(), "rb")) {
    if (!f) throw FormatError("cannot open " + p.string());
  }
  ~GzReader() { gzclose(f); }
  bool read(void* buf, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      int r = gzread(f, static_cast<char*>(buf) + got, static_cast<unsigned>(n - got));
      if (r <= 0) return false;
      got += static_cast<std::size_t>(r);
    }
    return true;
  }
};

std::uint16_t le16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* src, std::size_t n, std::size_t out_size) {
  std::vector<std::uint8_t> out(out_size);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw FormatError("inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out_size);
  int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != out_size) throw FormatError("corrupt deflate stream in zip entry");
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

std::vector<std::uint8_t> decode_jpeg(const std::vector<std::uint8_t>& bytes, int& w, int& h) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = [](j_common_ptr c) {
    auto* e = reinterpret_cast<JpegError*>(c->err);
    (*c->err->format_message)(c, e->message);
    std::longjmp(e->jump, 1);
  };
  std::vector<std::uint8_t> rgb;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("jpeg: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = static_cast<int>(cinfo.output_width);
  h = static_cast<int>(cinfo.output_height);
  rgb.resize(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * static_cast<std::size_t>(w) * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return rgb;
}

void append_jpeg(Dataset& ds, const fs::path& file, int label) {
  int w = 0, h = 0;
  auto rgb = decode_jpeg(read_bytes(file), w, h);
  if (w != ds.width || h != ds.height) throw FormatError(file.string() + ": unexpected image size");
  const std::size_t plane = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::size_t base = ds.pixels.size();
  ds.pixels.resize(base + 3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) ds.pixels[base + c * plane + p] = rgb[p * 3 + c];
  ds.labels.push_back(label);
}

struct Source {
  std::string url, archive, folder, checksum;
};

Source source_of(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kCifar10:
      return {"https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz", "cifar-10-binary.tar.gz",
              "cifar-10-batches-bin", "md5:c32a1d4ab5d03f1284b67883e8d87530"};
    case DatasetKind::kCifar100:
      return {"https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz", "cifar-100-binary.tar.gz",
              "cifar-100-binary", "md5:03b5dce01913d631647c71ecec9e9cb8"};
    case DatasetKind::kTinyImageNet:
      return {"http://cs231n.stanford.edu/tiny-imagenet-200.zip", "tiny-imagenet-200.zip", "tiny-imagenet-200",
              "md5:90528d7ca1a48142e341f4ef8d21d0de"};
    case DatasetKind::kSynthetic:
      break;
  }
  throw InvalidInputError("the synthetic dataset is generated, not fetched");
}

}  // namespace

Dataset load_cifar10(const fs::path& dir, bool train) {
  Dataset ds;
  ds.name = "cifar10";
  std::vector<fs::path> files;
  if (train) {
    for (int b = 1; b <= 5; ++b) files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  for (const auto& f : files) append_cifar_file(ds, f, 1, 0);
  auto names = read_lines(dir / "batches.meta.txt");
  ds.class_names = names.size() == 10 ? names : cifar10_names();
  ds.validate();
  return ds;
}

Dataset load_cifar100(const fs::path& dir, bool train) {
  Dataset ds;
  ds.name = "cifar100";
  append_cifar_file(ds, dir / (train ? "train.bin" : "test.bin"), 2, 1);
  ds.class_names = read_lines(dir / "fine_label_names.txt");
  if (ds.class_names.size() != 100) {
    ds.class_names.clear();
    for (int c = 0; c < 100; ++c) ds.class_names.push_back("class" + std::to_string(c));
  }
  ds.validate();
  return ds;
}

Dataset load_tinyimagenet(const fs::path& dir, bool train) {
  Dataset ds;
  ds.name = "tinyimagenet";
  ds.height = ds.width = 64;
  auto wnids = read_lines(dir / "wnids.txt");
  if (wnids.empty()) throw ProviderError("missing " + (dir / "wnids.txt").string());
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < wnids.size(); ++i) label_of[wnids[i]] = static_cast<int>(i);

  std::map<std::string, std::string> words;
  for (const auto& line : read_lines(dir / "words.txt")) {
    auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    auto name = line.substr(tab + 1);
    name = name.substr(0, name.find(','));
    words[line.substr(0, tab)] = name;
  }
  std::set<std::string> used;
  for (const auto& id : wnids) {
    // First synonym, made unique by appending the id if it collides.
    std::string name = words.count(id) ? words[id] : id;
    if (!used.insert(name).second) {
      name += " (" + id + ")";
      used.insert(name);
    }
    ds.class_names.push_back(name);
  }

  if (train) {
    for (const auto& id : wnids) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir / "train" / id / "images")) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) append_jpeg(ds, f, label_of[id]);
    }
  } else {
    for (const auto& line : read_lines(dir / "val" / "val_annotations.txt")) {
      std::istringstream ss(line);
      std::string file, id;
      ss >> file >> id;
      auto it = label_of.find(id);
      if (it == label_of.end()) throw FormatError("unknown wnid in val annotations: " + id);
      append_jpeg(ds, dir / "val" / "images" / file, it->second);
    }
  }
  ds.validate();
  return ds;
}

void extract_tar_gz(const fs::path& archive, const fs::path& dest) {
  GzReader gz(archive);
  std::array<char, 512> header{};
  std::string long_name;
  std::vector<char> buf;
  while (gz.read(header.data(), header.size())) {
    if (std::all_of(header.begin(), header.end(), [](char c) { return c == 0; })) break;
    std::string name(header.data(), strnlen(header.data(), 100));
    std::string prefix(header.data() + 345, strnlen(header.data() + 345, 155));
    if (!prefix.empty()) name = prefix + "/" + name;
    if (!long_name.empty()) {
      name = long_name;
      long_name.clear();
    }
    const std::uint64_t size = parse_octal(header.data() + 124, 12);
    const char type = header[156];
    const std::uint64_t padded = (size + 511) / 512 * 512;
    buf.resize(padded);
    if (padded && !gz.read(buf.data(), padded)) throw FormatError(archive.string() + ": truncated tar entry " + name);

    if (type == 'L') {
      long_name.assign(buf.data(), strnlen(buf.data(), size));
    } else if (type == '5') {
      fs::create_directories(safe_join(dest, name));
    } else if (type == '0' || type == '\0') {
      auto out_path = safe_join(dest, name);
      fs::create_directories(out_path.parent_path());
      std::ofstream out(out_path, std::ios::binary);
      out.write(buf.data(), static_cast<std::streamsize>(size));
      if (!out) throw FormatError("cannot write " + out_path.string());
    }
  }
}

void extract_zip(const fs::path& archive, const fs::path& dest) {
  auto z = read_bytes(archive);
  if (z.size() < 22) throw FormatError(archive.string() + ": not a zip file");
  // End-of-central-directory record is within the last 64 KiB + 22 bytes.
  std::size_t eocd = std::string::npos;
  for (std::size_t i = z.size() - 22 + 1; i-- > 0 && z.size() - i <= 65557;) {
    if (le32(&z[i]) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw FormatError(archive.string() + ": no end-of-central-directory record");
  const std::size_t entries = le16(&z[eocd + 10]);
  std::size_t p = le32(&z[eocd + 16]);
  for (std::size_t e = 0; e < entries; ++e) {
    if (p + 46 > z.size() || le32(&z[p]) != 0x02014b50) throw FormatError(archive.string() + ": bad central directory");
    const std::uint16_t method = le16(&z[p + 10]);
    const std::size_t csize = le32(&z[p + 20]), usize = le32(&z[p + 24]);
    const std::size_t name_len = le16(&z[p + 28]), extra_len = le16(&z[p + 30]), comment_len = le16(&z[p + 32]);
    const std::size_t local = le32(&z[p + 42]);
    std::string name(reinterpret_cast<const char*>(&z[p + 46]), name_len);
    p += 46 + name_len + extra_len + comment_len;

    if (local + 30 > z.size() || le32(&z[local]) != 0x04034b50) throw FormatError(archive.string() + ": bad local header");
    const std::size_t data = local + 30 + le16(&z[local + 26]) + le16(&z[local + 28]);
    if (data + csize > z.size()) throw FormatError(archive.string() + ": truncated entry " + name);
    auto out_path = safe_join(dest, name);
    if (!name.empty() && name.back() == '/') {
      fs::create_directories(out_path);
      continue;
    }
    std::vector<std::uint8_t> content;
    if (method == 0) {
      content.assign(z.begin() + static_cast<std::ptrdiff_t>(data), z.begin() + static_cast<std::ptrdiff_t>(data + csize));
    } else if (method == 8) {
      content = inflate_raw(&z[data], csize, usize);
    } else {
      throw FormatError(archive.string() + ": unsupported compression method " + std::to_string(method));
    }
    fs::create_directories(out_path.parent_path());
    std::ofstream out(out_path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(content.data()), static_cast<std::streamsize>(content.size()));
  }
}

void download_file(const std::string& url, const fs::path& dest) {
  fs::create_directories(dest.parent_path());
  auto partial = dest;
  partial += ".part";
  FILE* f = std::fopen(partial.c_str(), "wb");
  if (!f) throw ProviderError("cannot write " + partial.string());
  CURL* curl = curl_easy_init();
  if (!curl) {
    std::fclose(f);
    throw ProviderError("libcurl initialisation failed");
  }
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, f);
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl, CURLOPT_CONNECTTIMEOUT, 30L);
  CURLcode rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  std::fclose(f);
  if (rc != CURLE_OK) {
    fs::remove(partial);
    throw ProviderError("download of " + url + " failed: " + curl_easy_strerror(rc));
  }
  fs::rename(partial, dest);
}

void verify_checksum(const fs::path& file, const std::string& checksum) {
  if (checksum.empty() || checksum == "none") return;
  auto colon = checksum.find(':');
  if (colon == std::string::npos) throw ConfigError("checksum must look like md5:<hex> or sha256:<hex>");
  std::string algo = checksum.substr(0, colon), want = checksum.substr(colon + 1);
  std::string got;
  if (algo == "md5") {
    got = md5_file(file);
  } else if (algo == "sha256") {
    got = sha256_file(file);
  } else {
    throw ConfigError("unsupported checksum algorithm " + algo);
  }
  std::transform(want.begin(), want.end(), want.begin(), [](unsigned char c) { return std::tolower(c); });
  if (got != want) {
    throw IntegrityError(file.string() + ": " + algo + " " + got + " does not match expected " + want);
  }
}

fs::path ensure_dataset(DatasetKind kind, const FetchOptions& options) {
  auto src = source_of(kind);
  auto folder = options.cache_dir / src.folder;
  if (fs::exists(folder)) return folder;
  auto archive = options.cache_dir / src.archive;
  if (!fs::exists(archive)) {
    if (!options.download) {
      throw ProviderError(to_string(kind) + " not found under " + options.cache_dir.string() +
                          " and downloading is disabled; place " + src.archive + " there or enable download");
    }
    download_file(src.url, archive);
  }
  verify_checksum(archive, options.checksum.empty() ? src.checksum : options.checksum);
  if (src.archive.ends_with(".zip")) {
    extract_zip(archive, options.cache_dir);
  } else {
    extract_tar_gz(archive, options.cache_dir);
  }
  if (!fs::exists(folder)) throw FormatError(archive.string() + " did not contain " + src.folder);
  return folder;
}

Dataset load_dataset(DatasetKind kind, bool train, const FetchOptions& options) {
  auto dir = ensure_dataset(kind, options);
  switch (kind) {
    case DatasetKind::kCifar10: return load_cifar10(dir, train);
    case DatasetKind::kCifar100: return load_cifar100(dir, train);
    case DatasetKind::kTinyImageNet: return load_tinyimagenet(dir, train);
    case DatasetKind::kSynthetic: break;
  }
  throw InvalidInputError("the synthetic dataset is generated, not loaded");
}

}  // namespace semfl::data
