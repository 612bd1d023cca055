import numpy as np
import pytest

from evotet.assets import build_box_uv_atlas, export_assets, sample_texture_bilinear
from evotet.cli import main as cli_main
from evotet.fieldgrid import FieldConfig, field_eval, field_init, appearance_transform
from evotet.pipeline import RunConfig, dump_config, normalize_points_uniform
from evotet.render import load_png
from evotet.report import read_loss_csv, write_report
from evotet.sdfkit import load_obj, make_icosphere


APP_CFG = FieldConfig(levels=3, base_resolution=4, features_per_level=2,
                      table_size=4096, mlp_hidden=(16,), output_dim=8)


@pytest.fixture(scope="module")
def baked(tmp_path_factory):
    out = tmp_path_factory.mktemp("export")
    mesh = make_icosphere(0.5, 2)
    params = field_init(APP_CFG, seed=5)
    params.values[:] = np.random.default_rng(5).normal(0, 0.5, params.values.shape)
    _, tr = normalize_points_uniform(mesh.vertices)
    record = export_assets(mesh, params, tr, out, texture_size=128)
    return out, mesh, params, tr, record


def test_atlas_covers_all_faces(baked):
    _, mesh, *_ = baked
    atlas = build_box_uv_atlas(mesh)
    assert atlas.uv_faces.shape == mesh.faces.shape
    assert np.all((atlas.uvs >= 0) & (atlas.uvs <= 1))
    assert len(np.unique(atlas.chart_of_face)) >= 4


def test_export_roundtrip_counts(baked):
    out, mesh, *_ = baked
    back = load_obj(out / "mesh.obj")
    assert back.n_vertices == mesh.n_vertices
    assert back.n_faces == mesh.n_faces
    assert (out / "material.mtl").exists()


def test_texture_resolution_honors_config(baked):
    out, *_ = baked
    img = load_png(out / "albedo.png")
    assert img.shape == (128, 128, 3)
    assert load_png(out / "rm.png").shape == (128, 128, 3)
    assert load_png(out / "normal.png").shape == (128, 128, 3)


def test_baked_albedo_matches_field_at_texel_centers(baked):
    out, mesh, params, tr, record = baked
    png = load_png(out / "albedo.png")
    mat = appearance_transform(field_eval(params, tr.apply(record.points)))
    stored = png[record.texel_rc[:, 0], record.texel_rc[:, 1]]
    assert np.max(np.abs(stored - mat.albedo)) <= 2.0 / 255


def test_bilinear_sampler_matches_texel_centers(baked):
    out, mesh, params, tr, record = baked
    png = load_png(out / "albedo.png")
    t = png.shape[0]
    uv = np.stack([(record.texel_rc[:, 1] + 0.5) / t,
                   (record.texel_rc[:, 0] + 0.5) / t], axis=1)
    sampled = sample_texture_bilinear(png, uv)
    direct = png[record.texel_rc[:, 0], record.texel_rc[:, 1]]
    assert np.allclose(sampled, direct, atol=1e-12)


def test_report_csv_and_figures(tmp_path):
    rows = [{"stage": "init", "step": i, "sdf_init": 1.0 / (i + 1), "total": 1.0 / (i + 1)}
            for i in range(10)]
    rows += [{"stage": "coarse", "step": 10 + i, "sds": 0.5, "sdf_global": 0.1,
              "sdf_local": 0.01, "total": 0.61} for i in range(5)]
    write_report(rows, tmp_path)
    assert (tmp_path / "losses.csv").exists()
    assert (tmp_path / "losses.png").exists()
    back = read_loss_csv(tmp_path / "losses.csv")
    assert len(back) == 15
    assert back[0]["sdf_init"] == pytest.approx(1.0)
    assert back[-1]["total"] == pytest.approx(0.61)
    assert [r["step"] for r in back] == list(range(15))


def tiny_cfg_text(out_dir, extra=""):
    return f"""
seed = 11
steps.init = 60
steps.coarse = 6
steps.refine = 4
steps.appearance = 6
grid.resolution = 14
render.geometry_size = 40
render.color_size = 40
render.coarse_guidance_size = 10
sampling.surface = 512
sampling.random = 128
sampling.part_surface = 96
field_geometry.levels = 3
field_geometry.table_size = 2048
field_appearance.levels = 3
field_appearance.table_size = 2048
templates.geometry_interval = 4
templates.appearance_init_step = 2
templates.appearance_interval = 2
guidance.target_preset = wide_torso
output.directory = {out_dir}
output.texture_size = 64
{extra}
"""


@pytest.mark.slow
def test_cli_end_to_end(tmp_path, capsys):
    run_dir = tmp_path / "run"
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(tiny_cfg_text(run_dir))

    assert cli_main(["fit-geometry", "--config", str(cfg_path)]) == 0
    assert (run_dir / "mesh.obj").exists()
    assert (run_dir / "geometry.tfld").exists()
    assert (run_dir / "losses.csv").exists()
    assert (run_dir / "losses.png").exists()
    assert (run_dir / "config.lock").exists()

    assert cli_main(["fit-appearance", "--config", str(cfg_path),
                     "--mesh", str(run_dir / "mesh.obj")]) == 0
    assert (run_dir / "appearance.tfld").exists()
    rows = read_loss_csv(run_dir / "losses.csv")
    steps = [r["step"] for r in rows]
    assert steps == sorted(set(steps))  # appearance rows continue the counter

    assert cli_main(["export", "--run", str(run_dir)]) == 0
    assert (run_dir / "albedo.png").exists()
    assert (run_dir / "rm.png").exists()
    assert (run_dir / "normal.png").exists()
    assert (run_dir / "material.mtl").exists()
    assert load_png(run_dir / "albedo.png").shape == (64, 64, 3)

    a = tmp_path / "a.obj"
    from evotet.sdfkit import save_obj
    save_obj(a, make_icosphere(0.5, 1))
    b = tmp_path / "b.obj"
    save_obj(b, make_icosphere(0.55, 1))
    assert cli_main(["metrics", "--a", str(a), "--b", str(b)]) == 0
    out = capsys.readouterr().out
    assert "chamfer" in out and "hausdorff" in out


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("grid.resolution = notanint\n")
    assert cli_main(["fit-geometry", "--config", str(bad)]) == 2
    assert cli_main(["fit-geometry", "--config", str(tmp_path / "missing.cfg")]) == 4
    assert cli_main(["export", "--run", str(tmp_path / "nope")]) == 4
    assert cli_main(["metrics", "--a", str(tmp_path / "no.obj"),
                     "--b", str(tmp_path / "no.obj")]) == 4


def test_cli_gradcheck(capsys):
    assert cli_main(["gradcheck", "--module", "fieldgrid", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_config_lock_roundtrips(tmp_path):
    cfg = RunConfig()
    (tmp_path / "c.lock").write_text(dump_config(cfg))
    from evotet.pipeline import load_config
    assert load_config(tmp_path / "c.lock") == cfg
