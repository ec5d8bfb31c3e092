"""Command-line driver for the full recipe: scenario generation, FP
pretraining, codebook learning, calibration, ideal/system evaluation, and
report rendering.

Every command takes --config/--seed/--out plus repeatable dotted-path
overrides (--set section.key=value). Output CSVs embed the resolved config
hash and are byte-identical across reruns of the same config. Error classes
map to distinct exit codes (see _EXIT_CODES).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .calibrate import CalibConfig, build_calib_set, calibrate, dataset_ap, \
    naive_maxmin, QuantizedModel
from .codebook import Codebook, train_joint, train_stage1
from .comms import ChannelModel, LatencyProfile, WireError, fit_compressor, \
    simulate_system
from .config import (
    ARTIFACT_VERSION,
    ArtifactMismatchError,
    ConfigError,
    MissingArtifactError,
    check_manifest,
    config_hash,
    load_config,
    update_manifest,
)
from .grids import FeatureGrid, RngStream
from .model import ModelParams, TrainConfig, encode, eval_ap, fit_fp, \
    sample_observation
from .quantize import model_size_bytes
from .report import markdown_table, svg_chart
from .scene import Scenario, gen_scenario, label_grid

_EXIT_CODES = {
    ConfigError: 2,
    MissingArtifactError: 3,
    ArtifactMismatchError: 4,
    FloatingPointError: 5,
    WireError: 6,
    ValueError: 7,
}


def _out(cfg) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _csv_header_comment(cfg) -> list[str]:
    return [f"# config_hash={config_hash(cfg)} seed={cfg['seed']} "
            f"version={ARTIFACT_VERSION}"]


def _write_csv(path, cfg, header, rows):
    with open(path, "w", newline="") as f:
        for line in _csv_header_comment(cfg):
            f.write(line + "\n")
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def _read_csv(path):
    if not Path(path).exists():
        raise MissingArtifactError(f"missing metrics file: {path}")
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    rd = csv.DictReader(lines)
    return list(rd)


# ---------------------------------------------------------------------------
# Scenario and artifact plumbing
# ---------------------------------------------------------------------------


def _scenario_args(cfg):
    s = cfg["scenario"]
    return dict(n_agents=s["n_agents"], n_objects=s["n_objects"],
                n_frames=s["n_frames"], frame_dt_ms=s["frame_dt_ms"],
                roi=tuple(s["roi"]), fov_radius=s["fov_radius"])


def _write_scenarios(path, cfg, scenarios):
    blob = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": ARTIFACT_VERSION,
        "scenarios": [json.loads(s.to_json()) for s in scenarios],
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def _load_scenarios(out, split):
    path = out / f"scenarios_{split}.json"
    if not path.exists():
        raise MissingArtifactError(f"missing scenario file {path}; run gen first")
    blob = json.loads(path.read_text())
    return [Scenario.from_json(json.dumps(s)) for s in blob["scenarios"]]


def _load_model(out):
    path = out / "model.qv2x"
    if not path.exists():
        raise MissingArtifactError(f"missing model file {path}; run train first")
    return ModelParams.load(path)


def _train_features(scenarios, params, n_frames):
    """Encoder outputs on the first frames of the training set; shared by
    codebook learning and compressor fitting."""
    feats = []
    taken = 0
    for scn in scenarios:
        for fi in range(len(scn.frames)):
            if taken >= n_frames:
                return feats
            for agent in scn.agents:
                obs = FeatureGrid(sample_observation(scn, agent.id, fi))
                feats.append(encode(obs, params, agent.modality_tag))
            taken += 1
    return feats


def _calib_cfg(cfg) -> CalibConfig:
    c, q = cfg["calib"], cfg["quant"]
    return CalibConfig(fraction=c["fraction"], steps=c["steps"],
                       t_grid=c["t_grid"], adaround_iters=c["adaround_iters"],
                       adaround_lr=c["adaround_lr"],
                       lambda_hetero=c["lambda_hetero"],
                       lambda_spatial=c["lambda_spatial"],
                       bits_weights=q["bits_weights"],
                       bits_acts=q["bits_acts"],
                       weight_granularity=q["weight_granularity"],
                       seed=cfg["seed"])


def _latency_profile(cfg) -> LatencyProfile:
    l = cfg["latency"]
    return LatencyProfile(
        t_local_ms={"fp32": l["fp32_local_ms"], "int8": l["int8_local_ms"]},
        t_fus_ms={"fp32": l["fp32_fus_ms"], "int8": l["int8_fus_ms"]})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg) -> int:
    out = _out(cfg)
    s = cfg["scenario"]
    args = _scenario_args(cfg)
    train = [gen_scenario(seed=cfg["seed"] + i, **args)
             for i in range(s["n_train"])]
    evals = [gen_scenario(seed=cfg["seed"] + 10_000 + i, **args)
             for i in range(s["n_eval"])]
    _write_scenarios(out / "scenarios_train.json", cfg, train)
    _write_scenarios(out / "scenarios_eval.json", cfg, evals)
    update_manifest(out, "scenarios", cfg)
    print(f"wrote {len(train)} training and {len(evals)} eval scenarios to {out}")
    return 0


def cmd_train(cfg) -> int:
    out = _out(cfg)
    check_manifest(out, "scenarios", cfg)
    scns = _load_scenarios(out, "train")
    m = cfg["model"]
    tc = TrainConfig(epochs=m["epochs"], lr=m["lr"], batch=m["batch"],
                     seed=cfg["seed"], channels=m["channels"], hidden=m["hidden"],
                     val_fraction=m["val_fraction"])
    params = fit_fp(scns, tc)
    params.save(out / "model.qv2x", meta={"config_hash": config_hash(cfg),
                                          "seed": cfg["seed"],
                                          "version": ARTIFACT_VERSION})
    update_manifest(out, "model", cfg)
    print(f"trained model saved to {out / 'model.qv2x'}")
    return 0


def cmd_codebook(cfg) -> int:
    out = _out(cfg)
    check_manifest(out, "scenarios", cfg)
    check_manifest(out, "model", cfg)
    scns = _load_scenarios(out, "train")
    params, _ = _load_model(out)
    cb_cfg = cfg["codebook"]
    feats = _train_features(scns, params, cb_cfg["feature_frames"])
    cb = train_stage1(feats, n_L=cb_cfg["n_L"], n_R=cb_cfg["n_R"],
                      iters=cb_cfg["stage1_iters"], seed=cfg["seed"])
    if cb_cfg["joint_iters"] > 0:
        params, cb = train_joint(params, cb, scns,
                                 lambda_rec=cb_cfg["lambda_rec"],
                                 iters=cb_cfg["joint_iters"],
                                 lr=cb_cfg["joint_lr"], seed=cfg["seed"])
        params.save(out / "model.qv2x", meta={"config_hash": config_hash(cfg),
                                              "seed": cfg["seed"],
                                              "version": ARTIFACT_VERSION})
    cb.save(out / "codebook.qv2xcb")
    update_manifest(out, "codebook", cfg)
    print(f"codebook (n_L={cb.n_L}, n_R={cb.n_R}, "
          f"loss={cb.final_loss:.4f}) saved to {out / 'codebook.qv2xcb'}")
    return 0


def cmd_calibrate(cfg) -> int:
    out = _out(cfg)
    check_manifest(out, "scenarios", cfg)
    check_manifest(out, "model", cfg)
    scns = _load_scenarios(out, "train")
    params, _ = _load_model(out)
    ccfg = _calib_cfg(cfg)
    samples = build_calib_set(scns, ccfg, RngStream(cfg["seed"]))
    qm = calibrate(params, samples, ccfg)
    qm.save(out / "quantized.qv2xqm")
    nm = naive_maxmin(params, samples, ccfg)
    nm.save(out / "naive.qv2xqm")
    update_manifest(out, "quantized", cfg)
    print(f"calibrated W{ccfg.bits_weights}/A{ccfg.bits_acts} model saved to "
          f"{out / 'quantized.qv2xqm'} (+ max-min baseline)")
    return 0


def cmd_eval_ideal(cfg) -> int:
    out = _out(cfg)
    check_manifest(out, "scenarios", cfg)
    check_manifest(out, "model", cfg)
    check_manifest(out, "quantized", cfg)
    scns = _load_scenarios(out, "eval")
    params, _ = _load_model(out)
    qm = QuantizedModel.load(out / "quantized.qv2xqm")
    nm = QuantizedModel.load(out / "naive.qv2xqm")
    rows = []
    for sigma in cfg["eval"]["pose_noise_sigmas"]:
        noise = (float(sigma), 0.0)
        rows.append(["fp", float(sigma),
                     dataset_ap(scns, params, pose_noise=noise, seed=cfg["seed"])])
        rows.append(["calibrated", float(sigma),
                     dataset_ap(scns, params, qm.weight_fn(), qm.act_fn(),
                                pose_noise=noise, seed=cfg["seed"])])
        rows.append(["naive", float(sigma),
                     dataset_ap(scns, params, nm.weight_fn(), nm.act_fn(),
                                pose_noise=noise, seed=cfg["seed"])])
    _write_csv(out / "metrics_ideal.csv", cfg, ["model", "pose_sigma", "ap"], rows)
    update_manifest(out, "metrics_ideal", cfg)
    print(f"ideal metrics written to {out / 'metrics_ideal.csv'}")
    return 0


def cmd_eval_system(cfg) -> int:
    out = _out(cfg)
    for artifact in ("scenarios", "model", "quantized", "codebook"):
        check_manifest(out, artifact, cfg)
    train_scns = _load_scenarios(out, "train")
    scns = _load_scenarios(out, "eval")
    params, _ = _load_model(out)
    qm = QuantizedModel.load(out / "quantized.qv2xqm")
    cb = Codebook.load(out / "codebook.qv2xcb")
    comp = fit_compressor(
        _train_features(train_scns, params, cfg["codebook"]["feature_frames"]),
        factor=cfg["eval"]["compress_factor"])
    channel = ChannelModel(rate_mbps=cfg["channel"]["rate_mbps"],
                           jitter_ms=tuple(cfg["channel"]["jitter_ms"]))
    profile = _latency_profile(cfg)

    systems = {
        "fp_raw": dict(transport="raw_fp32"),
        "fp_x16": dict(transport="compressed_fp32", compressor=comp),
        "int8_codebook": dict(transport="codebook", quantized=qm, codebook=cb,
                              n_R=cfg["codebook"]["n_R"]),
    }
    metric_rows = []
    latency_rows = []
    for name, kw in systems.items():
        preds, labels = [], []
        t_sys_all = []
        for si, scn in enumerate(scns):
            ego = si % len(scn.agents)
            outs, bd = simulate_system(scn, ego, params, channel=channel,
                                       latency=profile, seed=cfg["seed"] + si,
                                       **kw)
            preds.extend(outs)
            labels.extend(label_grid(scn, fi, ego) for fi in range(len(scn.frames)))
            t_sys_all.extend(r[5] for r in bd.rows)
            latency_rows.extend([name, si] + list(r) for r in bd.rows)
        ap_system = eval_ap(preds, labels)
        wfn = qm.weight_fn() if "quantized" in kw else None
        afn = qm.act_fn() if "quantized" in kw else None
        ap_ideal = dataset_ap(scns, params, wfn, afn, seed=cfg["seed"])
        metric_rows.append([name, float(np.mean(t_sys_all)), ap_system,
                            ap_ideal, ap_ideal - ap_system])
    _write_csv(out / "metrics_system.csv", cfg,
               ["system", "mean_t_sys_ms", "ap_system", "ap_ideal", "gap"],
               metric_rows)
    _write_csv(out / "latency.csv", cfg,
               ["system", "scenario", "frame", "link", "t_local", "t_comm",
                "t_fus", "t_sys"], latency_rows)
    update_manifest(out, "metrics_system", cfg)
    print(f"system metrics written to {out / 'metrics_system.csv'}")
    return 0


def cmd_report(cfg) -> int:
    out = _out(cfg)
    for artifact in ("metrics_ideal", "metrics_system"):
        check_manifest(out, artifact, cfg)
    ideal = _read_csv(out / "metrics_ideal.csv")
    system = _read_csv(out / "metrics_system.csv")
    params, _ = _load_model(out)

    by_model = {}
    for row in ideal:
        by_model.setdefault(row["model"], ([], []))
        by_model[row["model"]][0].append(float(row["pose_sigma"]))
        by_model[row["model"]][1].append(float(row["ap"]))
    svg_chart(by_model, out / "ap_vs_pose_noise.svg",
              "Cell AP under pose noise", "pose sigma (m)", "cell AP")

    sys_series = {row["system"]: ([float(row["mean_t_sys_ms"])],
                                  [float(row["ap_system"])]) for row in system}
    svg_chart(sys_series, out / "ap_vs_latency.svg",
              "System cell AP vs end-to-end latency", "mean T_sys (ms)",
              "cell AP", scatter=True)

    gran = cfg["quant"]["weight_granularity"]
    bits = [4, 8, 16, 32]
    sizes = [model_size_bytes(params, b, gran) / 1024.0 for b in bits]
    svg_chart({"model": (bits, sizes)}, out / "size_vs_bits.svg",
              "Serialized model size vs bit width", "bits per weight",
              "size (KiB)")

    md = [f"# Run report\n",
          f"config hash `{config_hash(cfg)}`, seed {cfg['seed']}, "
          f"artifact version {ARTIFACT_VERSION}\n",
          "## Ideal-channel cell AP\n",
          markdown_table(["model", "pose sigma", "cell AP"],
                         [[r["model"], float(r["pose_sigma"]), float(r["ap"])]
                          for r in ideal]),
          "\n## System-level results\n",
          markdown_table(
              ["system", "mean T_sys (ms)", "system AP", "ideal AP", "gap"],
              [[r["system"], float(r["mean_t_sys_ms"]), float(r["ap_system"]),
                float(r["ap_ideal"]), float(r["gap"])] for r in system]),
          "\n## Model size\n",
          markdown_table(["bits", "size (KiB)"],
                         [[b, s] for b, s in zip(bits, sizes)]),
          "\nCharts: ap_vs_pose_noise.svg, ap_vs_latency.svg, size_vs_bits.svg\n"]
    (out / "report.md").write_text("\n".join(md))
    update_manifest(out, "report", cfg)
    print(f"report written to {out / 'report.md'}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "codebook": cmd_codebook,
    "calibrate": cmd_calibrate,
    "eval-ideal": cmd_eval_ideal,
    "eval-system": cmd_eval_system,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coopquant",
        description="quantized cooperative-perception pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
        sp.add_argument("--out", default=None, help="override the output dir")
        sp.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY.PATH=VALUE",
                        help="dotted-path config override (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.overrides,
                          seed=args.seed, out_dir=args.out)
        return _COMMANDS[args.command](cfg)
    except tuple(_EXIT_CODES) as e:
        for cls in type(e).__mro__:
            if cls in _EXIT_CODES:
                print(f"error: {e}", file=sys.stderr)
                return _EXIT_CODES[cls]
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
