"""Command-line entry point: ``gprmap <command> [--seed S] [--config C] [--out-dir D]``."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .autodiff import load_params, save_params
from .config import ConfigError, PipelineConfig, RunManifest, load_config, save_config
from .fileio import FormatError, atomic_write_text, read_json, read_ply, write_json, write_pgm, write_ply
from .forward import (ImageGrid, backproject, noisy_bscan, read_bscan, scatter_spacing, scatterers,
                      synthesize_bscan, time_to_depth, write_bscan)
from .mapping import write_poses
from .scene import SOILS, Trajectory, generate_grid_trajectory, generate_scene, load_scene, sample_surface_points, \
    save_scene

log = logging.getLogger("gprmap")


class _Ctx:
    def __init__(self, cfg: PipelineConfig, out_dir: Path, command: str, config_path: str | None):
        self.cfg = cfg
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, cfg.config_hash(), cfg.seed)
        if config_path:
            self.manifest.add_input(config_path)

    def output(self, name: str) -> Path:
        return self.out / name

    def done(self, *paths) -> None:
        for p in paths:
            self.manifest.add_output(p)
        cfg_path = self.out / "config.json"
        save_config(cfg_path, self.cfg)
        self.manifest.write(self.out)


def _common(f):
    f = click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True,
                     help="Directory for all outputs.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="JSON pipeline configuration; unspecified keys take their defaults.")(f)
    f = click.option("--seed", type=int, default=None, help="Overrides the configuration seed.")(f)
    return f


def _ctx(command: str, seed, config_path, out_dir) -> _Ctx:
    return _Ctx(load_config(config_path, seed), Path(out_dir), command, config_path)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Synthetic GPR toolkit: simulate, detect, map, complete and localize."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


def _material(cfg: PipelineConfig, scene_path=None):
    if scene_path is not None:
        return load_scene(scene_path).soil
    return SOILS[cfg.scene.soil]


# ---------------------------------------------------------------- simulate

@main.command()
@_common
def simulate(seed, config_path, out_dir):
    """Random scene, grid survey and one GPRB file per survey line."""
    c = _ctx("simulate", seed, config_path, out_dir)
    cfg = c.cfg
    with c.manifest.stage("scene"):
        scene = generate_scene(cfg.seed, cfg.scene)
        (x0, x1), (y0, y1), _ = scene.extent
        lines = generate_grid_trajectory(((x0, x1), (y0, y1)), cfg.survey.line_spacing, cfg.survey.trace_spacing,
                                         cfg.survey.height, cfg.survey.directions)
    outputs = [c.output("scene.json")]
    save_scene(outputs[0], scene)
    fwd = cfg.forward
    scatter = scatterers(scene, scatter_spacing(scene.soil, fwd))
    entries = []
    with c.manifest.stage("synthesize"):
        for i, traj in enumerate(lines):
            b = synthesize_bscan(scene, traj, fwd.wavelet, fwd.n_samples, fwd.dt, scatter)
            if fwd.noise_snr_db is not None:
                b = noisy_bscan(b, fwd.noise_snr_db, cfg.seed * 1000 + i)
            name = f"line_{i:03d}"
            write_bscan(c.output(f"{name}.gprb"), b)
            write_poses(c.output(f"{name}_poses.csv"), traj.poses)
            entries.append({"id": i, "bscan": f"{name}.gprb", "poses": f"{name}_poses.csv",
                            "spacing": traj.spacing})
            outputs += [c.output(f"{name}.gprb"), c.output(f"{name}_poses.csv")]
    gt = sample_surface_points(scene, cfg.gprnet.n_dense, cfg.seed)
    write_ply(c.output("gt.ply"), gt.points, gt.labels, comment="ground-truth surface samples")
    write_json(c.output("survey.json"), {"scene": "scene.json", "dt": fwd.dt, "lines": entries})
    outputs += [c.output("gt.ply"), c.output("survey.json")]
    c.done(*outputs)
    click.echo(f"simulated {len(entries)} B-scans into {c.out}")


def _read_survey(survey_dir: Path):
    meta = read_json(survey_dir / "survey.json")
    scene = load_scene(survey_dir / meta["scene"])
    return meta, scene


# ---------------------------------------------------------------- detect

@main.command()
@_common
@click.option("--survey", "survey_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory written by 'simulate'.")
def detect(seed, config_path, out_dir, survey_dir):
    """Hyperbola detections (box, keypoints, confidence) for every B-scan of a survey."""
    from .parnet import detect_classical

    c = _ctx("detect", seed, config_path, out_dir)
    sd = Path(survey_dir)
    meta, scene = _read_survey(sd)
    c.manifest.add_input(sd / "survey.json")
    out = []
    with c.manifest.stage("detect"):
        for line in meta["lines"]:
            path = sd / line["bscan"]
            c.manifest.add_input(path)
            b = read_bscan(path, scene.soil)
            dets = detect_classical(b, c.cfg.detector)
            out.append({"id": line["id"], "dt": b.dt,
                        "detections": [dataclasses.replace(d, bscan_id=line["id"]).to_dict() for d in dets]})
    p = c.output("detections.json")
    write_json(p, {"lines": out})
    c.done(p)
    click.echo(f"{sum(len(l['detections']) for l in out)} detections in {len(out)} B-scans")


# ---------------------------------------------------------------- map

@main.command("map")
@_common
@click.option("--survey", "survey_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--detections", "det_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Output of 'detect'.")
@click.option("--oracle", is_flag=True, help="Use detections derived from the true scene (with class labels).")
def map_(seed, config_path, out_dir, survey_dir, det_path, oracle):
    """Sparse world-frame point cloud from detections and survey poses."""
    from .mapping import SurveyLine, build_sparse_cloud, oracle_detections, read_poses
    from .parnet import Detection

    if oracle == (det_path is not None):
        raise click.UsageError("give exactly one of --detections and --oracle")
    c = _ctx("map", seed, config_path, out_dir)
    sd = Path(survey_dir)
    meta, scene = _read_survey(sd)
    c.manifest.add_input(sd / "survey.json")
    dets_by_line = {}
    if det_path:
        c.manifest.add_input(det_path)
        dets_by_line = {l["id"]: [Detection.from_dict(d) for d in l["detections"]]
                        for l in read_json(det_path)["lines"]}
    lines, labels = [], {}
    with c.manifest.stage("map"):
        for entry in meta["lines"]:
            poses = read_poses(sd / entry["poses"])
            traj = Trajectory(tuple(poses), entry["spacing"])
            if oracle:
                dets, labs = oracle_detections(scene, traj, meta["dt"])
                labels.update({(entry["id"], k): lab for k, lab in enumerate(labs)})
            else:
                dets = dets_by_line.get(entry["id"], [])
            lines.append(SurveyLine(entry["id"], dets, traj, meta["dt"]))
        cloud = build_sparse_cloud(lines, scene.soil, labels=labels or None)
    p = c.output("sparse.ply")
    lab = cloud.labels if oracle and len(cloud) else None
    write_ply(p, cloud.points, lab, comment="sparse vertex cloud")
    c.done(p)
    click.echo(f"{len(cloud)} sparse points")


# ---------------------------------------------------------------- GPRNet

def _dataset(cfg: PipelineConfig):
    from .gprnet import make_dataset

    data = make_dataset(cfg.dataset.n_scenes, cfg.gprnet, cfg.seed, cfg.gprnet_data)
    n_val = max(1, int(round(cfg.dataset.val_fraction * len(data))))
    return data[:-n_val], data[-n_val:]


def _save_model(c: _Ctx, model) -> list[Path]:
    w, j = c.output("gprnet.gprw"), c.output("gprnet.json")
    save_params(w, model.state_dict())
    write_json(j, model.cfg.to_dict())
    return [w, j]


def _load_model(path):
    from .gprnet import GprNet, GprNetConfig

    path = Path(path)
    cfg = GprNetConfig.from_dict(read_json(path.with_suffix(".json")))
    return GprNet(cfg, load_params(path))


@main.command("train-gprnet")
@_common
def train_gprnet_cmd(seed, config_path, out_dir):
    """Train the completion/segmentation network on synthetic three-class scenes."""
    from .gprnet import evaluate, metrics_csv, train_gprnet

    c = _ctx("train-gprnet", seed, config_path, out_dir)
    cfg = c.cfg
    with c.manifest.stage("dataset"):
        train, val = _dataset(cfg)
    with c.manifest.stage("train"):
        model, history = train_gprnet(train, cfg.gprnet, dataclasses.replace(cfg.train, seed=cfg.seed), val)
    rows, mean = evaluate(model, val)
    paths = _save_model(c, model)
    hp, mp = c.output("history.json"), c.output("val_metrics.csv")
    write_json(hp, history)
    atomic_write_text(mp, metrics_csv(rows))
    c.done(*paths, hp, mp)
    click.echo(" ".join(f"{k}={v:.6g}" for k, v in mean.items()))


@main.command()
@_common
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="GPRW weights from 'train-gprnet' (the .json config must sit next to it).")
@click.option("--cloud", "cloud_path", type=click.Path(exists=True, dir_okay=False), required=True)
def complete(seed, config_path, out_dir, model_path, cloud_path):
    """Dense labelled cloud from a sparse cloud."""
    from .mapping import complete_map

    c = _ctx("complete", seed, config_path, out_dir)
    c.manifest.add_input(model_path)
    c.manifest.add_input(cloud_path)
    pts, _ = read_ply(cloud_path)
    with c.manifest.stage("complete"):
        dense = complete_map(pts, _load_model(model_path), seed=c.cfg.seed)
    p = c.output("dense.ply")
    write_ply(p, dense.points, dense.labels, comment="completed cloud")
    c.done(p)
    click.echo(f"{len(dense.points)} dense points")


@main.command()
@_common
@click.option("--pred", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tau", type=float, default=0.02, show_default=True, help="F-score distance threshold.")
def metrics(seed, config_path, out_dir, pred_path, gt_path, tau):
    """CD, Pred-GT, GT-Pred, F-score and segmentation accuracy of one cloud against another.

    Accuracy compares each predicted label with that of the nearest ground-truth point.
    """
    from .gprnet import metrics_csv, scene_metrics
    from .kernels import nearest_sq_dists

    c = _ctx("metrics", seed, config_path, out_dir)
    c.manifest.add_input(pred_path)
    c.manifest.add_input(gt_path)
    pred, pl = read_ply(pred_path)
    gt, gl = read_ply(gt_path)
    _, idx = nearest_sq_dists(pred, gt)
    row = scene_metrics(pred, gt, pl, gl[idx], tau)
    p = c.output("metrics.csv")
    atomic_write_text(p, metrics_csv([row]))
    c.done(p)
    click.echo(" ".join(f"{k}={v:.6g}" for k, v in row.items()))


@main.command()
@_common
def ablate(seed, config_path, out_dir):
    """Train the four encoder/decoder variants and tabulate validation metrics."""
    from .gprnet import ablation

    c = _ctx("ablate", seed, config_path, out_dir)
    cfg = c.cfg
    with c.manifest.stage("dataset"):
        train, val = _dataset(cfg)
    with c.manifest.stage("train"):
        rows = ablation(train, val, cfg.gprnet, dataclasses.replace(cfg.train, seed=cfg.seed))
    p = c.output("ablation.csv")
    atomic_write_text(p, ablation_csv(rows))
    c.done(p)
    click.echo(ablation_csv(rows), nl=False)


def ablation_csv(rows) -> str:
    from .gprnet import METRIC_COLUMNS

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "tnet", "seg_decoder", "global_local", *METRIC_COLUMNS])
    for r in rows:
        w.writerow([r["config"], int(r["tnet"]), int(r["seg_decoder"]), int(r["global_local"]),
                    *(repr(float(r[k])) for k in METRIC_COLUMNS)])
    return buf.getvalue()


# ---------------------------------------------------------------- localization

@main.command("build-db")
@_common
@click.option("--soil", default="sand", show_default=True, type=click.Choice(sorted(SOILS)))
def build_db(seed, config_path, out_dir, soil):
    """Descriptor database over the localization survey grid."""
    from .localization import build_database, survey_positions, survey_scene, write_db

    c = _ctx("build-db", seed, config_path, out_dir)
    cfg = c.cfg
    scene = survey_scene(cfg.seed, soil, cfg.loc_survey)
    with c.manifest.stage("build"):
        db, params = build_database(scene, survey_positions(cfg.loc_survey), cfg.localization, seed=cfg.seed)
    dp, vp, sp = c.output("db.gprd"), c.output("vlad.gprw"), c.output("scene.json")
    write_db(dp, db)
    save_params(vp, params.to_dict())
    save_scene(sp, scene)
    c.done(dp, vp, sp)
    click.echo(f"{len(db)} entries, descriptor length {db.k * db.d}")


@main.command()
@_common
@click.option("--db", "db_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Database from 'build-db'; vlad.gprw and scene.json are read from the same directory.")
@click.option("--queries", "query_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="GPRB file whose traces are the query A-scans (true positions taken from the file).")
@click.option("--soils", default="sand,clay,loamy", show_default=True,
              help="Without --db: soils for a full build-and-query recall sweep.")
def localize(seed, config_path, out_dir, db_path, query_path, soils):
    """Match query A-scans against a database and report recall@1."""
    from .localization import (VladParams, jitter_positions, make_queries, match, nearest_entry, read_db,
                               recall_at_1, recall_csv, recall_experiment, scan_descriptor, survey_positions,
                               survey_scene)

    c = _ctx("localize", seed, config_path, out_dir)
    cfg = c.cfg
    rows = []
    outputs = []
    if db_path is None:
        if query_path is not None:
            raise click.UsageError("--queries needs --db")
        with c.manifest.stage("sweep"):
            for soil in [s.strip() for s in soils.split(",") if s.strip()]:
                if soil not in SOILS:
                    raise click.BadParameter(f"unknown soil {soil!r}", param_hint="--soils")
                r = recall_experiment(survey_scene(cfg.seed, soil, cfg.loc_survey), cfg.loc_survey,
                                      cfg.localization, cfg.seed)
                rows.append((soil, cfg.loc_survey.snr_db, r.noisy))
                click.echo(f"{soil}: duplicated {r.duplicated:.3f}, noisy {r.noisy:.3f}")
    else:
        dbdir = Path(db_path).parent
        for p in (db_path, dbdir / "vlad.gprw", dbdir / "scene.json"):
            c.manifest.add_input(p)
        db = read_db(db_path)
        params = VladParams.from_dict(load_params(dbdir / "vlad.gprw"))
        scene = load_scene(dbdir / "scene.json")
        with c.manifest.stage("query"):
            if query_path is not None:
                c.manifest.add_input(query_path)
                b = read_bscan(query_path, scene.soil)
                queries = [(scan_descriptor(t, params, cfg.localization), t.position[:2]) for t in b.traces]
                snr = None
            else:
                sv = cfg.loc_survey
                pos = jitter_positions(survey_positions(sv), sv.jitter * sv.spacing, seed=cfg.seed + 1)
                queries = make_queries(scene, pos, params, cfg.localization, snr_db=sv.snr_db, seed=cfg.seed + 2)
                snr = sv.snr_db
        mp = c.output("matches.csv")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query", "x", "y", "match_id", "match_x", "match_y", "similarity", "correct"])
        for i, (q, pos) in enumerate(queries):
            e, sim = match(q, db)
            w.writerow([i, repr(float(pos[0])), repr(float(pos[1])), e.id, repr(e.x), repr(e.y), repr(sim),
                        int(e.id == nearest_entry(pos, db).id)])
        atomic_write_text(mp, buf.getvalue())
        outputs.append(mp)
        rows.append((scene.soil.name, snr, recall_at_1(queries, db)))
    rp = c.output("recall.csv")
    atomic_write_text(rp, recall_csv(rows))
    c.done(*outputs, rp)
    click.echo(recall_csv(rows), nl=False)


# ---------------------------------------------------------------- render

@main.command()
@_common
@click.option("--bscan", "bscan_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="GPRB file rendered as a samples x traces PGM.")
@click.option("--migrate", is_flag=True, help="Also back-project the B-scan and render the image.")
@click.option("--cloud", "cloud_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="PLY cloud re-emitted as a labelled PLY.")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Scene JSON giving the soil of the B-scan (defaults to the configured soil).")
def render(seed, config_path, out_dir, bscan_path, migrate, cloud_path, scene_path):
    """Figure-style artifacts: PGM images of B-scans and migrated images, labelled PLY clouds."""
    if bscan_path is None and cloud_path is None:
        raise click.UsageError("nothing to render: give --bscan and/or --cloud")
    c = _ctx("render", seed, config_path, out_dir)
    outputs = []
    if bscan_path is not None:
        c.manifest.add_input(bscan_path)
        material = _material(c.cfg, scene_path)
        b = read_bscan(bscan_path, material)
        stem = Path(bscan_path).stem
        p = c.output(f"{stem}.pgm")
        write_pgm(p, b.data)
        outputs.append(p)
        if migrate:
            with c.manifest.stage("migrate"):
                img = backproject(b, _migration_grid(b))
            p = c.output(f"{stem}_migrated.pgm")
            write_pgm(p, img.grid)
            outputs.append(p)
    if cloud_path is not None:
        c.manifest.add_input(cloud_path)
        pts, lab = read_ply(cloud_path)
        if len(pts) == 0:
            raise ValueError(f"{cloud_path}: empty cloud")
        p = c.output(f"{Path(cloud_path).stem}_render.ply")
        write_ply(p, pts, lab, comment=f"rendered from {Path(cloud_path).name}")
        outputs.append(p)
    c.done(*outputs)
    click.echo(" ".join(str(p) for p in outputs))


def _migration_grid(b) -> ImageGrid:
    """Vertical plane under the survey line, cells of one trace spacing, down to the window depth."""
    pos = b.positions
    direction = pos[-1] - pos[0]
    length = float(np.linalg.norm(direction[:2]))
    if length == 0:
        raise ValueError("cannot migrate a B-scan without lateral extent")
    direction = direction / np.linalg.norm(direction)
    depth = 0.95 * float(time_to_depth((b.traces[0].samples.size - 1) * b.dt, b.material)) + pos[:, 2].min()
    return ImageGrid((0.0, length), (0.0, depth), b.trace_spacing,
                     origin=tuple(pos[0, :2]) + (0.0,), direction=tuple(direction))


def run(argv=None) -> int:
    """Entry point returning an exit code; domain errors become one-line diagnostics."""
    try:
        main.main(args=argv, prog_name="gprmap", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except (ConfigError, FormatError, ValueError, KeyError, OSError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
