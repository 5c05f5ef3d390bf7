// qmap: simulate, fit, evaluate and sweep from the command line.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qmap/qmap.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qmap;

namespace {

constexpr double kB0Threshold = 0.05;  // ms/μm²

void log_line(const std::string& msg) { std::cerr << "[qmap] " << msg << '\n'; }

json read_json_file(const fs::path& p) {
    try {
        return json::parse(csv::read_text(p));
    } catch (const json::parse_error& e) {
        throw UsageError("cannot parse JSON " + p.string() + ": " + e.what());
    }
}

/// A .nii.gz path is inflated with the external gzip tool into `scratch`.
fs::path plain_nifti(const fs::path& p, const fs::path& scratch) {
    if (!fs::exists(p)) throw UsageError("no such file: " + p.string());
    const std::string name = p.filename().string();
    if (name.size() < 3 || name.substr(name.size() - 3) != ".gz") return p;
    fs::create_directories(scratch);
    const fs::path out = scratch / p.stem();
    const std::string cmd = "gzip -dc '" + p.string() + "' > '" + out.string() + "'";
    if (std::system(cmd.c_str()) != 0) throw FormatError("gzip failed to inflate " + p.string());
    return out;
}

std::vector<double> parse_number_list(const std::string& text, const std::string& what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.find_first_not_of(" \t") == std::string::npos) continue;
        out.push_back(csv::parse_double(tok, what));
    }
    if (out.empty()) throw UsageError(what + ": empty list");
    return out;
}

std::optional<double> parse_snr(const std::string& s) {
    if (s == "none") return std::nullopt;
    const double v = csv::parse_double(s, "--snr");
    if (!(v > 0.0)) throw UsageError("--snr must be positive or 'none'");
    return v;
}

/// Precedence: built-in default < config file < command-line flag.
json merge_config(const json& defaults, const std::optional<fs::path>& file, const json& flags) {
    json merged = defaults;
    if (file) {
        const json j = read_json_file(*file);
        if (!j.is_object()) throw UsageError("config file must hold a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!defaults.contains(it.key())) throw UsageError("unknown config key '" + it.key() + "'");
            merged[it.key()] = it.value();
        }
    }
    for (auto it = flags.begin(); it != flags.end(); ++it) merged[it.key()] = it.value();
    return merged;
}

template <class T>
void take(const json& j, const char* key, T& field) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw UsageError(std::string("config key '") + key + "' has the wrong type");
    }
}

void take_optional(const json& j, const char* key, std::optional<double>& field) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
        field.reset();
        return;
    }
    double v = 0.0;
    take(j, key, v);
    field = v;
}

LsqConfig lsq_from_json(const json& j) {
    LsqConfig c;
    take(j, "max_iterations", c.max_iterations);
    take(j, "rel_tolerance", c.rel_tolerance);
    take(j, "lambda_init", c.lambda_init);
    take(j, "lambda_up", c.lambda_up);
    take(j, "lambda_down", c.lambda_down);
    take(j, "n_starts", c.n_starts);
    take(j, "degenerate_raw", c.degenerate_raw);
    return c;
}

SelfSupervisedConfig selfsup_from_json(const json& j) {
    SelfSupervisedConfig c;
    take(j, "hidden", c.hidden);
    take(j, "epochs", c.epochs);
    take(j, "batch_size", c.batch_size);
    take(j, "lr", c.lr);
    take_optional(j, "lr_final", c.lr_final);
    take(j, "seed", c.seed);
    return c;
}

VaeConfig vae_from_json(const json& j, VaeKind kind) {
    VaeConfig c;
    c.kind = kind;
    take(j, "latent_dim", c.latent_dim);
    take(j, "components", c.components);
    take(j, "hidden", c.hidden);
    take(j, "kl_weight", c.kl_weight);
    take(j, "epochs", c.epochs);
    take(j, "batch_size", c.batch_size);
    take(j, "lr", c.lr);
    take_optional(j, "lr_final", c.lr_final);
    take(j, "tau", c.tau);
    take(j, "mc_samples", c.mc_samples);
    take(j, "prior_jitter", c.prior_jitter);
    take(j, "seed", c.seed);
    c.validate();
    return c;
}

/// Default config for `fitter` as JSON, covering every accepted key.
json fitter_defaults(const std::string& fitter) {
    if (fitter == "lsq") return LsqConfig{}.to_json();
    if (fitter == "selfsup") return SelfSupervisedConfig{}.to_json();
    VaeConfig v;
    v.kind = fitter == "vae-gmm" ? VaeKind::gmm : VaeKind::unig;
    json j = v.to_json();
    j["components"] = v.components;
    j["tau"] = v.tau;
    j["prior_jitter"] = v.prior_jitter;
    j.erase("kind");
    return j;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    std::size_t n_voxels = 10000;
    std::string snr = "20";
    std::string clusters = "default";
    std::string bvals;
    std::string noise = "gaussian";
    std::uint64_t seed = 0;
    std::string out;
};

int run_simulate(const SimulateArgs& a) {
    SimulationConfig cfg;
    cfg.n_voxels = a.n_voxels;
    cfg.snr = parse_snr(a.snr);
    cfg.seed = a.seed;
    cfg.noise = a.noise == "rician" ? NoiseModel::rician : NoiseModel::gaussian;
    if (a.clusters != "default") {
        try {
            cfg.clusters = read_json_file(a.clusters).get<std::vector<ClusterSpec>>();
        } catch (const json::exception& e) {
            throw UsageError("bad cluster file " + a.clusters + ": " + e.what());
        }
    }
    const auto bvalues = a.bvals.empty() ? default_simulation_bvalues() : parse_number_list(a.bvals, "--bvals");
    const auto scheme = scheme_for_simulation(bvalues);

    SimulationReport rep;
    const VoxelDataset ds = simulate(cfg, scheme, &rep);
    json meta = simulation_meta(cfg, rep);
    meta["command"] = "simulate";
    meta["bvalues"] = bvalues;
    meta["version"] = kVersion;
    save_dataset(ds, a.out, meta);
    log_line("simulated " + std::to_string(ds.num_voxels()) + " voxels into " + a.out + " (clamped D " +
             std::to_string(rep.clamped_D) + ", clamped K " + std::to_string(rep.clamped_K) + ", floored " +
             std::to_string(rep.floored_signals) + ")");
    return 0;
}

// --------------------------------------------------------------------- fit

struct FitArgs {
    std::string fitter = "lsq";
    std::string model = "msdki";
    std::string stick_exponent = "squared";
    std::string data;
    std::string bval, bvec, mask;
    std::string bval_units = "auto";
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t threads = default_threads();
    std::string out;
    // Per-run overrides of the fitter config.
    std::optional<int> epochs, latent_dim, components, hidden, batch_size;
    std::optional<double> kl_weight, lr, lr_final, tau;
};

struct LoadedData {
    VoxelDataset ds;
    json provenance;
    std::optional<nifti::VoxelMask> mask;
};

LoadedData load_data(const FitArgs& a, const fs::path& scratch) {
    if (a.data.empty()) throw UsageError("--data is required");
    if (!fs::exists(a.data)) throw UsageError("no such file or directory: " + a.data);
    if (fs::is_directory(a.data)) return {load_dataset(a.data), {{"kind", "dataset"}, {"path", a.data}}, std::nullopt};
    if (a.bval.empty() || a.bvec.empty()) throw UsageError("NIfTI input needs both --bval and --bvec");
    BvalUnits units = BvalUnits::auto_detect;
    if (a.bval_units == "s/mm2") units = BvalUnits::s_per_mm2;
    else if (a.bval_units == "ms/um2") units = BvalUnits::ms_per_um2;
    const auto scheme = parse_bval_bvec(csv::read_text(a.bval), csv::read_text(a.bvec), units, kB0Threshold);
    log_line(std::string("b-values interpreted as ") + (scheme.converted_from_s_per_mm2() ? "s/mm2" : "ms/um2") +
             " (max b " + csv::format_double(*std::max_element(scheme.bvalues().begin(), scheme.bvalues().end())) +
             " ms/um2 after conversion)");
    const auto vol = nifti::read_nifti(plain_nifti(a.data, scratch));
    nifti::VoxelMask mask = a.mask.empty() ? nifti::threshold_mask(vol, scheme)
                                           : nifti::mask_from_volume(nifti::read_nifti(plain_nifti(a.mask, scratch)));
    nifti::FlattenReport rep;
    LoadedData out{nifti::normalize_and_flatten(vol, scheme, mask, &rep), {}, mask};
    out.provenance = {{"kind", "nifti"},
                      {"path", a.data},
                      {"bval", a.bval},
                      {"bvec", a.bvec},
                      {"mask", a.mask.empty() ? json("threshold") : json(a.mask)},
                      {"masked_voxels", mask.count()},
                      {"dropped_nonpositive_b0", rep.dropped_nonpositive_b0}};
    log_line("flattened " + std::to_string(out.ds.num_voxels()) + " masked voxels (" +
             std::to_string(rep.dropped_nonpositive_b0) + " dropped for b0 <= 0)");
    return out;
}

json fit_flag_overrides(const FitArgs& a) {
    json f = json::object();
    if (a.seed) f["seed"] = *a.seed;
    if (a.epochs) f["epochs"] = *a.epochs;
    if (a.latent_dim) f["latent_dim"] = *a.latent_dim;
    if (a.components) f["components"] = *a.components;
    if (a.hidden) f["hidden"] = *a.hidden;
    if (a.batch_size) f["batch_size"] = *a.batch_size;
    if (a.kl_weight) f["kl_weight"] = *a.kl_weight;
    if (a.lr) f["lr"] = *a.lr;
    if (a.lr_final) f["lr_final"] = *a.lr_final;
    if (a.tau) f["tau"] = *a.tau;
    return f;
}

std::unique_ptr<SignalModel> model_for(const FitArgs& a) {
    const auto exponent = a.stick_exponent == "linear" ? StickExponent::linear : StickExponent::squared;
    return make_model(model_from_string(a.model), exponent);
}

/// Writes one NIfTI map per parameter when the fit came from a volume.
void write_param_maps(const FitResult& fit, const fs::path& out) {
    if (!fit.spatial) return;
    for (std::size_t p = 0; p < fit.param_names.size(); ++p)
        nifti::write_nifti(nifti::unflatten(fit.params.col(static_cast<Eigen::Index>(p)), *fit.spatial),
                           out / (fit.param_names[p] + ".nii"));
}

int run_fit(const FitArgs& a) {
    if (a.out.empty()) throw UsageError("--out is required");
    if (a.threads == 0) throw UsageError("--threads must be >= 1");
    const fs::path out = a.out;
    const LoadedData data = load_data(a, out / ".scratch");
    fs::remove_all(out / ".scratch");
    const auto model = model_for(a);

    const std::optional<fs::path> cfg_file = a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config);
    json flags = fit_flag_overrides(a);
    if (a.fitter == "lsq") flags.erase("seed");
    const json merged = merge_config(fitter_defaults(a.fitter), cfg_file, flags);
    log_line("config for " + a.fitter + ": " + merged.dump());

    json extra = {{"command", "fit"},
                  {"data", data.provenance},
                  {"merged_config", merged},
                  {"threads", a.threads},
                  {"stick_exponent", a.stick_exponent}};
    FitResult fit;
    if (a.fitter == "lsq") {
        LsqConfig c = lsq_from_json(merged);
        c.threads = a.threads;
        fit = fit_lsq(data.ds, *model, c);
        save_fit(fit, out, extra);
    } else if (a.fitter == "selfsup") {
        std::vector<double> history;
        nn::DenseNet net;
        fit = fit_selfsupervised(data.ds, *model, selfsup_from_json(merged), &history, &net);
        save_fit(fit, out, extra);
        csv::write_text(out / "model.json", json({{"format", "qmap-selfsup"}, {"version", kVersion},
                                                  {"net", net.to_json()}}).dump() + '\n');
        std::string text = "epoch,loss\n";
        for (std::size_t e = 0; e < history.size(); ++e) text += std::to_string(e) + "," + csv::format_double(history[e]) + "\n";
        csv::write_text(out / "training_log.csv", text);
    } else {
        const VaeKind kind = a.fitter == "vae-gmm" ? VaeKind::gmm : VaeKind::unig;
        const VaeFit vf = train_vae(data.ds, *model, vae_from_json(merged, kind));
        fit = vf.fit;
        save_fit(fit, out, extra);
        csv::write_text(out / "model.json", vae_checkpoint(vf).dump() + '\n');
        export_latent(vf.posterior, out / "latent.csv");
        std::string text = "epoch,loss,recon,kl_z,kl_y\n";
        for (std::size_t e = 0; e < vf.log.epochs.size(); ++e) {
            const auto& t = vf.log.epochs[e];
            text += std::to_string(e) + "," + csv::format_double(t.loss) + "," + csv::format_double(t.recon) + "," +
                    csv::format_double(t.kl_z) + "," + csv::format_double(t.kl_y) + "\n";
        }
        csv::write_text(out / "training_log.csv", text);
    }
    write_param_maps(fit, out);
    if (data.mask) {
        nifti::Volume4D m;
        m.dims = {data.mask->dims[0], data.mask->dims[1], data.mask->dims[2], 1};
        m.voxel_size = data.ds.spatial->voxel_size;
        m.affine = data.ds.spatial->affine;
        m.data.assign(data.mask->inside.begin(), data.mask->inside.end());
        nifti::write_nifti(m, out / "mask.nii");
    }
    log_line(a.fitter + " fitted " + std::to_string(fit.num_voxels()) + " voxels in " +
             csv::format_double(fit.wall_time) + " s");
    return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::vector<std::string> fits;
    std::string truth;
    std::string mask;
    std::string out;
    bool scatter = false;
};

json pairwise(const FitResult& a, const FitResult& b, const std::string& la, const std::string& lb) {
    if (a.params.rows() != b.params.rows()) throw UsageError("fits " + la + " and " + lb + " cover different voxels");
    json params = json::object();
    for (std::size_t p = 0; p < a.param_names.size(); ++p) {
        const auto it = std::find(b.param_names.begin(), b.param_names.end(), a.param_names[p]);
        if (it == b.param_names.end()) continue;
        const auto q = static_cast<Eigen::Index>(it - b.param_names.begin());
        const ErrorStats s = error_stats(a.params.col(static_cast<Eigen::Index>(p)), b.params.col(q));
        params[a.param_names[p]] = {{"rmse", s.rmse}, {"mean_difference", s.bias}, {"pearson_r", s.pearson}};
    }
    return {{"a", la}, {"b", lb}, {"params", params}};
}

int run_evaluate(const EvaluateArgs& a) {
    if (a.fits.empty()) throw UsageError("--fits needs at least one directory");
    if (a.scatter && a.truth.empty()) throw UsageError("scatter export requested but no --truth given");
    const fs::path out = a.out;
    std::vector<FitResult> fits;
    std::vector<std::string> labels;
    for (const auto& d : a.fits) {
        fits.push_back(load_fit(d));
        labels.push_back(fs::path(d).filename().string().empty() ? fs::path(d).parent_path().filename().string()
                                                                 : fs::path(d).filename().string());
    }
    std::optional<VoxelDataset> truth_ds;
    if (!a.truth.empty()) {
        truth_ds = load_dataset(a.truth);
        if (!truth_ds->truth) throw UsageError(a.truth + " has no truth.csv");
    }
    fs::create_directories(out);

    json report = {{"version", kVersion}, {"fits", json::array()}, {"pairwise", json::array()}};
    for (std::size_t i = 0; i < fits.size(); ++i) {
        json entry = {{"label", labels[i]}, {"fitter", fits[i].fitter_id}, {"path", a.fits[i]},
                      {"n_voxels", fits[i].num_voxels()}};
        if (truth_ds) {
            const auto names = truth_ds->truth_names;
            const Metrics m = score(fits[i], *truth_ds->truth, truth_ds->labels ? &*truth_ds->labels : nullptr,
                                    names ? &*names : nullptr);
            entry["metrics"] = m.to_json();
            if (a.scatter) {
                Eigen::MatrixXd truth = *truth_ds->truth;
                if (names) {
                    Eigen::MatrixXd aligned(truth.rows(), static_cast<Eigen::Index>(fits[i].param_names.size()));
                    for (std::size_t p = 0; p < fits[i].param_names.size(); ++p) {
                        const auto it = std::find(names->begin(), names->end(), fits[i].param_names[p]);
                        if (it == names->end()) throw UsageError("truth has no column " + fits[i].param_names[p]);
                        aligned.col(static_cast<Eigen::Index>(p)) = truth.col(it - names->begin());
                    }
                    truth = aligned;
                }
                const fs::path file = out / ("scatter_" + labels[i] + ".csv");
                export_scatter(fits[i], &truth, truth_ds->labels ? &*truth_ds->labels : nullptr, file);
                entry["scatter"] = file.filename().string();
            }
        }
        report["fits"].push_back(entry);
    }
    for (std::size_t i = 0; i < fits.size(); ++i)
        for (std::size_t j = i + 1; j < fits.size(); ++j)
            report["pairwise"].push_back(pairwise(fits[i], fits[j], labels[i], labels[j]));

    if (fits.front().spatial) {
        nifti::VoxelMask mask;
        if (!a.mask.empty()) {
            mask = nifti::mask_from_volume(nifti::read_nifti(plain_nifti(a.mask, out / ".scratch")));
            fs::remove_all(out / ".scratch");
        } else {
            const auto& sp = *fits.front().spatial;
            mask = {sp.dims, std::vector<std::uint8_t>(sp.dims[0] * sp.dims[1] * sp.dims[2], 0)};
            for (auto idx : sp.linear_index) mask.inside[idx] = 1;
        }
        std::vector<FitResult> relabeled = fits;
        for (std::size_t i = 0; i < fits.size(); ++i) relabeled[i].fitter_id = labels[i];
        const MapComparison cmp = compare_maps(relabeled, mask, out / "maps");
        report["maps"] = {{"files", json::array()}, {"differences", json::array()},
                          {"background_noise", cmp.background_noise}};
        for (const auto& f : cmp.map_files) report["maps"]["files"].push_back(f.filename().string());
        for (const auto& f : cmp.difference_files) report["maps"]["differences"].push_back(f.filename().string());
    }

    csv::write_text(out / "metrics.json", report.dump(2) + '\n');
    csv::write_text(out / "meta.json", json({{"command", "evaluate"},
                                             {"version", kVersion},
                                             {"fits", a.fits},
                                             {"truth", a.truth.empty() ? json(nullptr) : json(a.truth)},
                                             {"scatter", a.scatter}})
                                           .dump(2) + '\n');
    log_line("evaluated " + std::to_string(fits.size()) + " fit(s) into " + out.string());
    return 0;
}

// ------------------------------------------------------------------- sweep

struct SweepArgs {
    FitArgs fit;
    std::string param;
    std::string values;
};

int run_sweep(const SweepArgs& a) {
    if (a.fit.out.empty()) throw UsageError("--out is required");
    const std::vector<double> values = parse_number_list(a.values, "--values");
    if (a.fit.fitter != "vae-unig" && a.fit.fitter != "vae-gmm") throw UsageError("sweep needs a VAE fitter");
    const fs::path out = a.fit.out;
    const LoadedData data = load_data(a.fit, out / ".scratch");
    fs::remove_all(out / ".scratch");
    const auto model = model_for(a.fit);
    const std::optional<fs::path> cfg_file =
        a.fit.config.empty() ? std::nullopt : std::optional<fs::path>(a.fit.config);
    const json base = merge_config(fitter_defaults(a.fit.fitter), cfg_file, fit_flag_overrides(a.fit));
    const VaeKind kind = a.fit.fitter == "vae-gmm" ? VaeKind::gmm : VaeKind::unig;
    const auto names = model->param_names();

    std::string table = a.param;
    for (const auto& n : names) table += "," + n + "_rmse," + n + "_pearson";
    table += ",final_loss,final_recon,final_kl\n";
    json runs = json::array();
    for (double v : values) {
        json cfg = base;
        if (a.param == "latent-dim") {
            if (v < 1 || v != std::floor(v)) throw UsageError("latent-dim values must be positive integers");
            cfg["latent_dim"] = static_cast<int>(v);
        } else {
            cfg["kl_weight"] = v;
        }
        const VaeFit vf = train_vae(data.ds, *model, vae_from_json(cfg, kind));
        table += a.param == "latent-dim" ? std::to_string(static_cast<int>(v)) : csv::format_double(v);
        json row = {{"value", v}};
        std::optional<Metrics> m;
        if (data.ds.truth)
            m = score(vf.fit, *data.ds.truth, data.ds.labels ? &*data.ds.labels : nullptr,
                      data.ds.truth_names ? &*data.ds.truth_names : nullptr);
        for (const auto& n : names) {
            if (m) {
                const auto& s = m->param(n).overall;
                table += "," + csv::format_double(s.rmse) + "," + csv::format_double(s.pearson);
                row[n] = {{"rmse", s.rmse}, {"pearson_r", s.pearson}};
            } else {
                table += ",,";
            }
        }
        const ElboTerms last = vf.log.epochs.empty() ? ElboTerms{} : vf.log.epochs.back();
        table += "," + csv::format_double(last.loss) + "," + csv::format_double(last.recon) + "," +
                 csv::format_double(last.kl_z + last.kl_y) + "\n";
        runs.push_back(row);
        log_line("sweep " + a.param + "=" + csv::format_double(v) + " done");
    }
    fs::create_directories(out);
    csv::write_text(out / "sweep.csv", table);
    csv::write_text(out / "meta.json", json({{"command", "sweep"},
                                             {"version", kVersion},
                                             {"fitter", a.fit.fitter},
                                             {"param", a.param},
                                             {"values", values},
                                             {"base_config", base},
                                             {"data", data.provenance},
                                             {"runs", runs}})
                                           .dump(2) + '\n');
    return 0;
}

void add_fit_options(CLI::App* cmd, FitArgs& a) {
    cmd->add_option("--fitter", a.fitter, "lsq | selfsup | vae-unig | vae-gmm")
        ->check(CLI::IsMember({"lsq", "selfsup", "vae-unig", "vae-gmm"}));
    cmd->add_option("--model", a.model, "msdki | ballstick")->check(CLI::IsMember({"msdki", "ballstick"}));
    cmd->add_option("--stick-exponent", a.stick_exponent, "ball-stick dot-product exponent")
        ->check(CLI::IsMember({"squared", "linear"}));
    cmd->add_option("--data", a.data, "dataset directory or 4-D NIfTI (.nii or .nii.gz)")->required();
    cmd->add_option("--bval", a.bval, "bval file (NIfTI input)");
    cmd->add_option("--bvec", a.bvec, "bvec file (NIfTI input)");
    cmd->add_option("--bval-units", a.bval_units, "auto | s/mm2 | ms/um2")
        ->check(CLI::IsMember({"auto", "s/mm2", "ms/um2"}));
    cmd->add_option("--mask", a.mask, "mask NIfTI; default is the b0 threshold mask");
    cmd->add_option("--config", a.config, "fitter config JSON");
    cmd->add_option("--seed", a.seed, "training seed");
    cmd->add_option("--threads", a.threads, "worker threads for voxel-parallel fitting");
    cmd->add_option("--out", a.out, "output directory")->required();
    cmd->add_option("--epochs", a.epochs);
    cmd->add_option("--latent-dim", a.latent_dim);
    cmd->add_option("--components", a.components);
    cmd->add_option("--hidden", a.hidden);
    cmd->add_option("--batch-size", a.batch_size);
    cmd->add_option("--kl-weight", a.kl_weight);
    cmd->add_option("--lr", a.lr);
    cmd->add_option("--lr-final", a.lr_final, "cosine learning-rate decay target");
    cmd->add_option("--tau", a.tau, "Gumbel-softmax temperature");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qmap: quantitative diffusion MRI parameter mapping"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* sim_cmd = app.add_subcommand("simulate", "generate the three-cluster MSDKI phantom");
    sim_cmd->add_option("--n-voxels", sim.n_voxels, "number of voxels");
    sim_cmd->add_option("--snr", sim.snr, "signal-to-noise ratio or 'none'");
    sim_cmd->add_option("--clusters", sim.clusters, "cluster JSON file or 'default'");
    sim_cmd->add_option("--bvals", sim.bvals, "comma-separated b-values in ms/um2");
    sim_cmd->add_option("--noise", sim.noise, "gaussian | rician")->check(CLI::IsMember({"gaussian", "rician"}));
    sim_cmd->add_option("--seed", sim.seed, "simulation seed");
    sim_cmd->add_option("--out", sim.out, "output directory")->required();

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "fit a parameter map");
    add_fit_options(fit_cmd, fit);

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "score and compare fits");
    ev_cmd->add_option("--fits", ev.fits, "fit directories")->required();
    ev_cmd->add_option("--truth", ev.truth, "simulated dataset directory holding truth.csv");
    ev_cmd->add_option("--mask", ev.mask, "mask NIfTI for map comparisons");
    ev_cmd->add_flag("--scatter", ev.scatter, "export truth-vs-prediction scatter CSVs");
    ev_cmd->add_option("--out", ev.out, "output directory")->required();

    SweepArgs sw;
    sw.fit.fitter = "vae-unig";
    auto* sw_cmd = app.add_subcommand("sweep", "train a VAE fitter over a list of hyperparameter values");
    add_fit_options(sw_cmd, sw.fit);
    sw_cmd->add_option("--param", sw.param, "latent-dim | kl-weight")
        ->required()
        ->check(CLI::IsMember({"latent-dim", "kl-weight"}));
    sw_cmd->add_option("--values", sw.values, "comma-separated values")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*sim_cmd) return run_simulate(sim);
        if (*fit_cmd) return run_fit(fit);
        if (*ev_cmd) return run_evaluate(ev);
        if (*sw_cmd) return run_sweep(sw);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
