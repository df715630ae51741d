// Command-line front end: registration, preprocessing, evaluation, phantoms and sweeps.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pulmoreg/pulmoreg.hpp"

namespace fs = std::filesystem;
using namespace pulmoreg;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  int threads = 0;
  std::uint64_t seed = 1;
  double boundary_weight_multiplier = 1.0;
  bool boundary_weight_set = false;
  bool verbose = false;
};

RegistrationConfig load_config(const Globals& g) {
  RegistrationConfig cfg;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw IoError("cannot open config " + g.config);
    json j;
    try {
      in >> j;
      from_json(j, cfg);
    } catch (const json::exception& e) {
      throw ValidationError("invalid config " + g.config + ": " + e.what());
    }
  }
  cfg.seed = g.seed;
  if (g.boundary_weight_set) cfg.multilevel.boundary_weight_multiplier = g.boundary_weight_multiplier;
  return cfg;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void print_or_write(const json& j, const std::string& out) {
  if (out.empty())
    std::cout << j.dump(2) << '\n';
  else
    write_json(j, out);
}

ProgressCallback progress_printer(bool verbose) {
  if (!verbose) return {};
  return [](const ProgressEvent& e) {
    std::fprintf(stderr, "%s level %d iter %3d  J %.6g  D %.6g  R %.6g  B %.6g  V %.6g  K %.6g\n", e.stage, e.level, e.iteration,
                 e.value, e.terms.distance, e.terms.curvature, e.terms.boundary, e.terms.volume, e.terms.keypoints);
  };
}

struct RegisterArgs {
  std::string fixed, moving, fixed_mask, moving_mask, out_dir;
  bool no_keypoints = false;
};

int run_register(const Globals& g, const RegisterArgs& a) {
  auto cfg = load_config(g);
  if (a.no_keypoints) cfg.use_keypoints = false;
  const auto f = read_metaimage(a.fixed), m = read_metaimage(a.moving);
  const auto fm = read_metaimage(a.fixed_mask), mm = read_metaimage(a.moving_mask);
  const auto res = register_images(f, m, fm, mm, cfg, progress_printer(g.verbose));
  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);
  write_vector_field(res.displacement, out / "displacement.mhd");
  write_metaimage(res.warped_moving, out / "warped_moving.mhd");
  write_correspondences(res.correspondences, out / "correspondences.csv");
  write_json(res.report, out / "report.json");
  std::cout << "min det " << res.jacobian.min << ", mean det " << res.jacobian.mean << ", "
            << res.correspondences.size() << " correspondences; outputs in " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lung CT deformable registration"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--threads", g.threads, "worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", g.seed, "random seed (phantoms)");
  auto* bwm = app.add_option("--boundary-weight-multiplier", g.boundary_weight_multiplier,
                             "scale the adaptive boundary weight")
                  ->check(CLI::NonNegativeNumber);
  app.add_flag("-v,--verbose", g.verbose, "print optimisation progress");

  // register
  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "register moving to fixed");
  reg->add_option("--fixed", ra.fixed)->required()->check(CLI::ExistingFile);
  reg->add_option("--moving", ra.moving)->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed-mask", ra.fixed_mask)->required()->check(CLI::ExistingFile);
  reg->add_option("--moving-mask", ra.moving_mask)->required()->check(CLI::ExistingFile);
  reg->add_option("-o,--out-dir", ra.out_dir)->required();
  reg->add_flag("--no-keypoints", ra.no_keypoints, "disable the keypoint term");

  // preprocess
  std::string pp_image, pp_mask, pp_out, pp_mask_out;
  double pp_spacing = 1.0;
  auto* pre = app.add_subcommand("preprocess", "mask an image and resample it to isotropic spacing");
  pre->add_option("--image", pp_image)->required()->check(CLI::ExistingFile);
  pre->add_option("--mask", pp_mask)->required()->check(CLI::ExistingFile);
  pre->add_option("--spacing", pp_spacing, "isotropic spacing (mm)")->check(CLI::PositiveNumber);
  pre->add_option("-o,--out", pp_out)->required();
  pre->add_option("--mask-out", pp_mask_out, "resampled mask output");

  // keypoints
  RegisterArgs ka;
  std::string kp_out;
  auto* kp = app.add_subcommand("keypoints", "pre-register and compute keypoint correspondences");
  kp->add_option("--fixed", ka.fixed)->required()->check(CLI::ExistingFile);
  kp->add_option("--moving", ka.moving)->required()->check(CLI::ExistingFile);
  kp->add_option("--fixed-mask", ka.fixed_mask)->required()->check(CLI::ExistingFile);
  kp->add_option("--moving-mask", ka.moving_mask)->required()->check(CLI::ExistingFile);
  kp->add_option("-o,--out", kp_out, "correspondence CSV")->required();

  // eval-tre
  std::string tre_fixed, tre_moving, tre_field, tre_snap, tre_out;
  auto* tre = app.add_subcommand("eval-tre", "landmark registration error");
  tre->add_option("--fixed-landmarks", tre_fixed)->required()->check(CLI::ExistingFile);
  tre->add_option("--moving-landmarks", tre_moving)->required()->check(CLI::ExistingFile);
  tre->add_option("--field", tre_field, "displacement field (omit for identity)")->check(CLI::ExistingFile);
  tre->add_option("--snap-to", tre_snap, "moving image whose voxel centres targets are snapped to")
      ->check(CLI::ExistingFile);
  tre->add_option("-o,--out", tre_out, "JSON output (default stdout)");

  // eval-fissure
  std::string fis_fixed, fis_moving, fis_field, fis_out;
  auto* fis = app.add_subcommand("eval-fissure", "mean distance between warped fissures");
  fis->add_option("--fixed-fissure", fis_fixed)->required()->check(CLI::ExistingFile);
  fis->add_option("--moving-fissure", fis_moving)->required()->check(CLI::ExistingFile);
  fis->add_option("--field", fis_field)->check(CLI::ExistingFile);
  fis->add_option("-o,--out", fis_out);

  // eval-jacobian
  std::string jac_field, jac_mask, jac_out;
  auto* jac = app.add_subcommand("eval-jacobian", "Jacobian determinant statistics inside a mask");
  jac->add_option("--field", jac_field)->required()->check(CLI::ExistingFile);
  jac->add_option("--mask", jac_mask)->required()->check(CLI::ExistingFile);
  jac->add_option("-o,--out", jac_out);

  // phantom
  PhantomConfig pc;
  std::string ph_out;
  auto* ph = app.add_subcommand("phantom", "write a synthetic phantom pair with ground truth");
  ph->add_option("-o,--out-dir", ph_out)->required();
  ph->add_option("--size", pc.size)->check(CLI::Range(8, 1024));
  ph->add_option("--spacing", pc.spacing)->check(CLI::PositiveNumber);
  ph->add_option("--amplitude", pc.amplitude, "largest displacement (mm)")->check(CLI::NonNegativeNumber);
  ph->add_option("--twist-fraction", pc.twist_fraction)->check(CLI::Range(0.0, 1.0));
  ph->add_option("--density-shift", pc.density_shift);
  ph->add_option("--landmarks", pc.landmarks)->check(CLI::NonNegativeNumber);

  // sweep
  RegisterArgs sa;
  std::string sw_fixed_lm, sw_moving_lm, sw_param = "alpha";
  std::vector<double> sw_factors;
  auto* sw = app.add_subcommand("sweep", "re-run registration with one parameter scaled");
  sw->add_option("--fixed", sa.fixed)->required()->check(CLI::ExistingFile);
  sw->add_option("--moving", sa.moving)->required()->check(CLI::ExistingFile);
  sw->add_option("--fixed-mask", sa.fixed_mask)->required()->check(CLI::ExistingFile);
  sw->add_option("--moving-mask", sa.moving_mask)->required()->check(CLI::ExistingFile);
  sw->add_option("--fixed-landmarks", sw_fixed_lm)->required()->check(CLI::ExistingFile);
  sw->add_option("--moving-landmarks", sw_moving_lm)->required()->check(CLI::ExistingFile);
  sw->add_option("--parameter", sw_param, "alpha, alpha_kp, gamma or eta")
      ->check(CLI::IsMember({"alpha", "alpha_kp", "gamma", "eta"}));
  sw->add_option("--factors", sw_factors, "multipliers (default 1e-5 ... 1e5)");
  sw->add_option("-o,--out-dir", sa.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  g.boundary_weight_set = bwm->count() > 0;

  try {
    parallel::set_thread_count(g.threads);
    if (g.verbose)
      log::set_sink([](log::Level, const std::string& msg) { std::cerr << msg << '\n'; });

    if (*reg) return run_register(g, ra);

    if (*pre) {
      const auto r = preprocess(read_metaimage(pp_image), read_metaimage(pp_mask), pp_spacing);
      write_metaimage(r.image, pp_out);
      if (!pp_mask_out.empty()) write_metaimage(r.mask, pp_mask_out, ElementType::kUInt8);
      return 0;
    }

    if (*kp) {
      const auto cfg = load_config(g);
      const auto f = read_metaimage(ka.fixed), m = read_metaimage(ka.moving);
      const auto bf = binarize(read_metaimage(ka.fixed_mask)), bm = binarize(read_metaimage(ka.moving_mask));
      const auto prereg = preregister(bf, bm, cfg.prereg);
      std::size_t detected = 0;
      const auto corr = keypoint_stage(apply_mask(f, bf), bf, apply_mask(m, bm), prereg.transform, cfg, &detected);
      write_correspondences(corr, kp_out);
      std::cout << detected << " keypoints, " << corr.size() << " correspondences\n";
      return 0;
    }

    if (*tre) {
      const auto fp = read_points(tre_fixed), mp = read_points(tre_moving);
      VectorField field;
      if (!tre_field.empty()) {
        field = read_vector_field(tre_field);
      } else {
        // Identity over the landmarks' bounding box.
        Grid box;
        Vec3 lo = fp.empty() ? Vec3{} : fp[0], hi = lo;
        for (const auto& p : fp)
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
          }
        box.origin = lo - Vec3{1, 1, 1};
        box.dims = {2, 2, 2};
        box.spacing = hi - lo + Vec3{2, 2, 2};
        field = zero_field(box);
      }
      std::optional<Grid> snap;
      if (!tre_snap.empty()) snap = read_metaimage_raw(tre_snap).grid;
      const auto r = eval_tre(fp, mp, field, snap ? &*snap : nullptr);
      if (!r.excluded.empty())
        std::cerr << r.excluded.size() << " landmark(s) outside the field domain were excluded\n";
      print_or_write(json(r), tre_out);
      return 0;
    }

    if (*fis) {
      const auto ff = read_metaimage(fis_fixed), mf = read_metaimage(fis_moving);
      const auto field = fis_field.empty() ? zero_field(ff.grid()) : read_vector_field(fis_field);
      const auto r = eval_fissure(ff, mf, field);
      print_or_write(json{{"mean", r.mean}, {"std", r.std}, {"voxels", r.voxels}}, fis_out);
      return 0;
    }

    if (*jac) {
      const auto field = read_vector_field(jac_field);
      const auto mask = read_metaimage(jac_mask);
      print_or_write(json(eval_jacobian(field, mask)), jac_out);
      return 0;
    }

    if (*ph) {
      pc.seed = g.seed;
      const auto p = make_phantom(pc);
      fs::create_directories(ph_out);
      const fs::path out(ph_out);
      write_metaimage(p.fixed, out / "fixed.mhd", ElementType::kInt16);
      write_metaimage(p.moving, out / "moving.mhd", ElementType::kInt16);
      write_metaimage(p.fixed_mask, out / "fixed_mask.mhd", ElementType::kUInt8);
      write_metaimage(p.moving_mask, out / "moving_mask.mhd", ElementType::kUInt8);
      write_vector_field(p.displacement, out / "ground_truth.mhd");
      write_points(p.fixed_landmarks, out / "fixed_landmarks.csv");
      write_points(p.moving_landmarks, out / "moving_landmarks.csv");
      return 0;
    }

    if (*sw) {
      const auto cfg = load_config(g);
      SweepInputs in{read_metaimage(sa.fixed),   read_metaimage(sa.moving), read_metaimage(sa.fixed_mask),
                     read_metaimage(sa.moving_mask), read_points(sw_fixed_lm), read_points(sw_moving_lm)};
      const auto param = parse_sweep_parameter(sw_param);
      const auto factors = sw_factors.empty() ? default_sweep_factors() : sw_factors;
      fs::create_directories(sa.out_dir);
      const fs::path out(sa.out_dir);
      int cell = 0;
      const auto rows = sweep(in, cfg, param, factors, [&](const SweepRow& row, const RegistrationResult* res) {
        const fs::path dir = out / ("cell_" + std::to_string(cell++));
        fs::create_directories(dir);
        if (res) {
          write_json(res->report, dir / "report.json");
          write_vector_field(res->displacement, dir / "displacement.mhd");
        }
        std::cerr << to_string(param) << " x " << row.factor << ": "
                  << (row.ok ? std::to_string(row.mean_tre) + " mm" : "failed (" + row.error + ")") << '\n';
      });
      json table = json::array();
      std::ofstream tsv(out / "table.tsv");
      tsv << "parameter\tfactor\tmean_tre\tstd_tre\tmin_det\tstatus\n";
      for (const auto& r : rows) {
        table.push_back({{"factor", r.factor},
                         {"ok", r.ok},
                         {"mean_tre", r.mean_tre},
                         {"std_tre", r.std_tre},
                         {"min_det", r.min_det},
                         {"error", r.error}});
        tsv << to_string(param) << '\t' << r.factor << '\t' << r.mean_tre << '\t' << r.std_tre << '\t' << r.min_det
            << '\t' << (r.ok ? "ok" : "failed") << '\n';
      }
      write_json({{"parameter", to_string(param)}, {"rows", table}}, out / "sweep.json");
      return 0;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
