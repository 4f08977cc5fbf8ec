#include "mshift/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mshift/errors.hpp"
#include "mshift/rng.hpp"

namespace fs = std::filesystem;

namespace mshift::data {

namespace {

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::vector<PatchRecord> parse_manifest(std::istream& in, const std::string& origin) {
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != kManifestHeader)
        throw DataError(origin + ": bad header, expected \"" + kManifestHeader + "\"");
    std::vector<PatchRecord> records;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 3)
            throw DataError(origin + " line " + std::to_string(lineno) + ": expected 3 fields, got " +
                            std::to_string(fields.size()));
        PatchRecord rec;
        rec.image_path = fields[0];
        rec.domain = fields[2];
        rec.line = lineno;
        if (rec.image_path.empty())
            throw DataError(origin + " line " + std::to_string(lineno) + ": empty image path");
        if (fields[1] != "0" && fields[1] != "1")
            throw DataError(origin + " line " + std::to_string(lineno) +
                            ": label must be 0 or 1, got \"" + fields[1] + "\"");
        rec.label = fields[1] == "1" ? 1 : 0;
        if (rec.domain.empty())
            throw DataError(origin + " line " + std::to_string(lineno) + ": empty domain");
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<PatchRecord> load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("manifest: cannot open " + path);
    return parse_manifest(in, path);
}

Dataset load_dataset(const std::string& manifest_path) {
    Dataset ds;
    ds.records = load_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    std::set<std::string> names;
    for (const auto& rec : ds.records) names.insert(rec.domain);
    ds.domain_names.assign(names.begin(), names.end());

    for (const auto& rec : ds.records) {
        const fs::path p = fs::path(rec.image_path).is_absolute()
                               ? fs::path(rec.image_path)
                               : base / rec.image_path;
        RgbPatch img;
        try {
            img = read_png(p.string());
        } catch (const DataError& e) {
            throw DataError(manifest_path + " line " + std::to_string(rec.line) + ": " + e.what());
        }
        if (!img.square())
            throw DataError(manifest_path + " line " + std::to_string(rec.line) +
                            ": image is not square (" + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + ")");
        if (!ds.images.empty() && img.width != ds.images.front().width)
            throw DataError(manifest_path + " line " + std::to_string(rec.line) +
                            ": image side differs from the rest of the dataset");
        ds.images.push_back(std::move(img));
        ds.labels.push_back(rec.label);
        const auto it = std::lower_bound(ds.domain_names.begin(), ds.domain_names.end(), rec.domain);
        ds.domain_ids.push_back(static_cast<int>(it - ds.domain_names.begin()));
    }
    return ds;
}

Dataset dataset_from_memory(std::vector<RgbPatch> images, std::vector<int> labels,
                            std::vector<std::string> domains) {
    if (images.size() != labels.size() || images.size() != domains.size())
        throw DataError("dataset: mismatched images/labels/domains sizes");
    Dataset ds;
    std::set<std::string> names(domains.begin(), domains.end());
    ds.domain_names.assign(names.begin(), names.end());
    for (std::size_t i = 0; i < images.size(); ++i) {
        PatchRecord rec;
        rec.image_path = "<memory:" + std::to_string(i) + ">";
        rec.label = labels[i];
        rec.domain = domains[i];
        ds.records.push_back(rec);
        const auto it = std::lower_bound(ds.domain_names.begin(), ds.domain_names.end(), domains[i]);
        ds.domain_ids.push_back(static_cast<int>(it - ds.domain_names.begin()));
    }
    ds.images = std::move(images);
    ds.labels = std::move(labels);
    return ds;
}

// ---- embeddings --------------------------------------------------------------

namespace {
constexpr char kEmbMagic[7] = {'M', 'S', 'E', 'M', 'B', '0', '1'};
}

void save_embeddings(const std::string& path, const EmbeddingSet& set) {
    if (set.vectors.rows() != static_cast<Eigen::Index>(set.records.size()) ||
        set.vectors.cols() != set.dim)
        throw DataError("embeddings: vectors/records shape mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("embeddings: cannot write " + path);
    os.write(kEmbMagic, sizeof(kEmbMagic));
    const std::uint32_t count = static_cast<std::uint32_t>(set.records.size());
    const std::uint32_t dim = static_cast<std::uint32_t>(set.dim);
    os.write(reinterpret_cast<const char*>(&count), 4);
    os.write(reinterpret_cast<const char*>(&dim), 4);
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::uint32_t j = 0; j < dim; ++j) {
            const double v = set.vectors(i, j);
            os.write(reinterpret_cast<const char*>(&v), 8);
        }
    }
    os << kManifestHeader << '\n';
    for (const auto& rec : set.records)
        os << rec.image_path << ',' << rec.label << ',' << rec.domain << '\n';
    if (!os) throw DataError("embeddings: write failed for " + path);
}

EmbeddingSet load_embeddings(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("embeddings: cannot open " + path);
    char magic[7];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kEmbMagic, sizeof(magic)) != 0)
        throw DataError("embeddings: bad magic in " + path);
    std::uint32_t count = 0, dim = 0;
    if (!is.read(reinterpret_cast<char*>(&count), 4) || !is.read(reinterpret_cast<char*>(&dim), 4))
        throw DataError("embeddings: truncated header in " + path);
    if (dim == 0) throw DataError("embeddings: zero dimension in " + path);
    EmbeddingSet set;
    set.dim = static_cast<int>(dim);
    set.vectors.resize(count, dim);
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::uint32_t j = 0; j < dim; ++j) {
            double v = 0;
            if (!is.read(reinterpret_cast<char*>(&v), 8))
                throw DataError("embeddings: size mismatch, payload truncated in " + path);
            set.vectors(i, j) = v;
        }
    }
    set.records = parse_manifest(is, path + " (embedded manifest)");
    if (set.records.size() != count)
        throw DataError("embeddings: size mismatch, " + std::to_string(count) +
                        " vectors vs " + std::to_string(set.records.size()) + " manifest rows");
    return set;
}

// ---- synthetic generator ------------------------------------------------------

Eigen::Matrix<double, 3, 2> domain_stain_matrix(double angle_deg) {
    if (angle_deg < 0.0 || angle_deg > 25.0)
        throw ConfigError("synth: stain perturbation angle " + std::to_string(angle_deg) +
                          " outside [0, 25] degrees");
    const Eigen::Matrix<double, 3, 2> base = stain::ruifrok_he();
    const Eigen::Vector3d axis = (base.col(0) + base.col(1)).normalized();
    const Eigen::Matrix3d rot =
        Eigen::AngleAxisd(angle_deg * M_PI / 180.0, axis).toRotationMatrix();
    Eigen::Matrix<double, 3, 2> s = rot * base;
    s = s.cwiseMax(0.0);
    for (int c = 0; c < 2; ++c) s.col(c).normalize();
    return s;
}

namespace {

struct Blob {
    double cx, cy;       // center, normalized coords
    double r0;           // base radius
    double aspect;       // second-axis ratio (ellipse)
    double lobe_amp;     // angular radius modulation
    int lobe_count;
    double phase;
    double orient;
    double intensity;
};

double blob_field(const std::vector<Blob>& blobs, double u, double v) {
    double total = 0.0;
    for (const Blob& b : blobs) {
        const double dx0 = u - b.cx, dy0 = v - b.cy;
        const double co = std::cos(b.orient), si = std::sin(b.orient);
        const double dx = co * dx0 + si * dy0;
        const double dy = -si * dx0 + co * dy0;
        const double theta = std::atan2(dy, dx);
        const double radius =
            b.r0 * (1.0 + b.lobe_amp * std::cos(b.lobe_count * theta + b.phase));
        const double rr = std::sqrt(dx * dx + (dy / b.aspect) * (dy / b.aspect));
        const double rho = rr / std::max(radius, 1e-6);
        if (rho < 2.5) total += b.intensity * std::exp(-3.0 * rho * rho);
    }
    return total;
}

double smoothstep01(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

}  // namespace

SynthPatch gen_patch(const SynthConfig& cfg, int domain_idx, int label, int index) {
    if (domain_idx < 0 || domain_idx >= static_cast<int>(cfg.domains.size()))
        throw ConfigError("synth: domain index out of range");
    if (cfg.noise_sigma < 0) throw ConfigError("synth: negative noise sigma");
    if (cfg.side < 16) throw ConfigError("synth: side must be at least 16");
    const DomainSpec& dom = cfg.domains[static_cast<std::size_t>(domain_idx)];

    Rng rng(Rng::mix(Rng::mix(cfg.seed, dom.seed),
                     static_cast<std::uint64_t>(label) * 1000003ULL +
                         static_cast<std::uint64_t>(index)));

    SynthPatch out;
    out.label = label;
    out.domain = domain_idx;
    out.stain = domain_stain_matrix(dom.angle_deg);
    out.image = RgbPatch(cfg.side, cfg.side);
    out.background.assign(static_cast<std::size_t>(cfg.side) * cfg.side, 0);

    // eosin wash: smooth low-frequency field on top of a per-patch base level.
    // The hematoxylin haze fraction is held constant so the eosin extreme
    // direction is the same in every patch; per-patch ratios would make
    // estimated stain models drift between reference and source fits. At
    // 0.12 the wash stays above the tissue OD threshold in every channel
    // across the whole 0-25 degree stain rotation range.
    const double base_e = rng.uniform(1.50, 1.60);
    const double haze = 0.12;
    struct Wave {
        double amp, px, py, phase;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
        waves.push_back({rng.uniform(0.03, 0.09), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                         rng.uniform(0.0, 6.283185307179586)});

    const bool easy = cfg.difficulty == Difficulty::Easy;
    std::vector<Blob> blobs;
    if (label == 0) {
        Blob b;
        b.cx = 0.5 + rng.uniform(-0.08, 0.08);
        b.cy = 0.5 + rng.uniform(-0.08, 0.08);
        b.r0 = rng.uniform(0.14, 0.18);
        b.aspect = rng.uniform(0.65, 0.85);
        b.lobe_amp = easy ? 0.0 : rng.uniform(0.08, 0.18);
        b.lobe_count = 3;
        b.phase = rng.uniform(0.0, 6.283185307179586);
        b.orient = rng.uniform(0.0, 3.141592653589793);
        b.intensity = easy ? rng.uniform(1.0, 1.3) : rng.uniform(0.9, 1.25);
        blobs.push_back(b);
    } else {
        const int nb = easy ? 3 : 2;
        for (int k = 0; k < nb; ++k) {
            Blob b;
            const double spread = easy ? 0.14 : 0.10;
            b.cx = 0.5 + rng.uniform(-spread, spread);
            b.cy = 0.5 + rng.uniform(-spread, spread);
            b.r0 = easy ? rng.uniform(0.10, 0.14) : rng.uniform(0.10, 0.15);
            b.aspect = rng.uniform(0.8, 1.0);
            b.lobe_amp = easy ? rng.uniform(0.25, 0.45) : rng.uniform(0.15, 0.30);
            b.lobe_count = 3 + rng.uniform_int(3);
            b.phase = rng.uniform(0.0, 6.283185307179586);
            b.orient = rng.uniform(0.0, 3.141592653589793);
            b.intensity = easy ? rng.uniform(0.9, 1.2) : rng.uniform(0.8, 1.1);
            blobs.push_back(b);
        }
    }

    const int margin = std::max(3, cfg.side / 12);
    const double taper_w = 3.0;
    for (int row = 0; row < cfg.side; ++row) {
        for (int col = 0; col < cfg.side; ++col) {
            const double u = (col + 0.5) / cfg.side;
            const double v = (row + 0.5) / cfg.side;
            const int border = std::min(std::min(row, cfg.side - 1 - row),
                                        std::min(col, cfg.side - 1 - col));
            const double taper = smoothstep01((border - margin) / taper_w);
            const std::size_t px = static_cast<std::size_t>(row) * cfg.side + col;
            if (taper == 0.0) out.background[px] = 1;

            double wash = base_e;
            for (const Wave& w : waves)
                wash += base_e * w.amp *
                        std::cos(6.283185307179586 * (w.px * u + w.py * v) + w.phase);
            wash = std::max(0.0, wash);

            const double bf = blob_field(blobs, u, v);
            // Eosin drops to zero well inside each blob so the pure
            // hematoxylin population is large enough for the extreme-angle
            // percentile to land on it.
            const double c_e = wash * std::clamp(1.0 - 2.0 * std::min(bf, 1.0), 0.0, 1.0) * taper;
            const double c_h = std::min(haze * c_e + bf * taper, 2.3);

            Eigen::Vector3d odv = out.stain * Eigen::Vector2d(c_h, c_e);
            // Cap the deepest channel at OD 1.35 (~11 intensity counts) by
            // scaling the concentration pair; 8-bit quantization below that
            // destroys the linearity the estimators rely on. The scaling
            // keeps the pixel on its stain ray, and capped wash pixels stay
            // above the red-channel tissue threshold.
            const double peak = odv.maxCoeff();
            if (peak > 1.35) odv *= 1.35 / peak;
            for (int ch = 0; ch < 3; ++ch) {
                double inten = 255.0 * std::pow(10.0, -odv[ch]);
                if (cfg.noise_sigma > 0) inten += cfg.noise_sigma * rng.normal();
                out.image.pixels[3 * px + static_cast<std::size_t>(ch)] =
                    static_cast<std::uint8_t>(std::clamp(std::nearbyint(inten), 0.0, 255.0));
            }
        }
    }
    return out;
}

void gen_synth(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.n_per_class_per_domain < 1) throw ConfigError("synth: n_per_class_per_domain < 1");
    if (cfg.domains.empty()) throw ConfigError("synth: no domains configured");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw DataError("synth: cannot create output directory " + out_dir);

    std::ofstream manifest(fs::path(out_dir) / "manifest.csv", std::ios::binary);
    if (!manifest) throw DataError("synth: cannot write manifest in " + out_dir);
    manifest << kManifestHeader << '\n';

    std::ofstream sidecar(fs::path(out_dir) / "domains.txt", std::ios::binary);
    if (!sidecar) throw DataError("synth: cannot write domains.txt in " + out_dir);

    for (std::size_t d = 0; d < cfg.domains.size(); ++d) {
        std::vector<double> ch_all, ce_all;
        Eigen::Matrix<double, 3, 2> stain_d;
        for (int label = 0; label < 2; ++label) {
            for (int i = 0; i < cfg.n_per_class_per_domain; ++i) {
                const SynthPatch patch = gen_patch(cfg, static_cast<int>(d), label, i);
                stain_d = patch.stain;
                char name[64];
                std::snprintf(name, sizeof(name), "images/d%zu_c%d_%04d.png", d, label, i);
                write_png((fs::path(out_dir) / name).string(), patch.image);
                manifest << name << ',' << label << ",scanner_" << d << '\n';
                // concentrations implied by the render, for the sidecar scale
                const stain::OdImage od = stain::rgb_to_od(patch.image);
                stain::StainModel m;
                m.stain_matrix = patch.stain;
                m.max_conc << 1.0, 1.0;
                const Eigen::Matrix2Xd conc = stain::concentrations(od, m);
                for (Eigen::Index px = 0; px < conc.cols(); px += 7) {
                    ch_all.push_back(conc(0, px));
                    ce_all.push_back(conc(1, px));
                }
            }
        }
        std::sort(ch_all.begin(), ch_all.end());
        std::sort(ce_all.begin(), ce_all.end());
        const auto pct99 = [](const std::vector<double>& v) {
            const double pos = 0.99 * static_cast<double>(v.size() - 1);
            const std::size_t lo = static_cast<std::size_t>(pos);
            if (lo + 1 >= v.size()) return v.back();
            return v[lo] + (pos - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
        };
        stain::StainModel truth;
        truth.stain_matrix = stain_d;
        truth.max_conc << pct99(ch_all), pct99(ce_all);
        sidecar << "scanner_" << d << '\n' << stain::stain_model_to_string(truth);
    }
    if (!manifest || !sidecar) throw DataError("synth: write failed in " + out_dir);
}

std::vector<std::pair<std::string, stain::StainModel>> load_domains_sidecar(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("sidecar: cannot open " + path);
    std::vector<std::pair<std::string, stain::StainModel>> out;
    std::string name;
    while (std::getline(is, name)) {
        if (name.empty()) continue;
        std::string block, line;
        for (int i = 0; i < 4 && std::getline(is, line); ++i) block += line + "\n";
        out.emplace_back(name, stain::stain_model_from_string(block));
    }
    return out;
}

}  // namespace mshift::data
