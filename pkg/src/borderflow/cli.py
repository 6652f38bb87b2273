"""Command-line entry point.

Subcommands: gen-data, train, eval, sample, gradcheck. Every command is
deterministic given the configuration and seeds, writes its outputs under
--out, and echoes the effective configuration there so the run can be
reproduced from the echo alone.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import config as cfgmod
from . import data as datamod
from . import evaluate
from . import flow as flowmod
from . import gradcheck
from . import joint
from . import metrics
from . import tensorio
from .autodiff import Tensor
from .checkpoint import (generator_from_state, generator_state,
                         load_checkpoint, save_checkpoint)
from .optim import AdamState, CosineSchedule


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="borderflow")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, required=out_required)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train models on a corpus")
    common(p)
    p.add_argument("--mode", choices=("imagewide", "dense"), default=None)
    p.add_argument("--checkpoint", type=Path, default=None, help="resume from a training checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("imagewide", "dense"), default=None)
    p.add_argument("--temps", type=str, default=None, help='e.g. "1,2,10"')

    p = sub.add_parser("sample", help="write generated samples as PPM images")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the training losses")
    p.add_argument("--out", type=Path, default=None)
    return parser


def _load_cfg(args, extra_overrides: dict | None = None):
    overrides = {"seed": args.seed}
    if extra_overrides:
        overrides.update(extra_overrides)
    return cfgmod.load_config(args.config, overrides)


def _echo_config(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.format_effective(cfg))


MODE_FOR_TASK = {"points": "imagewide", "scenes": "dense"}
TASK_FOR_MODE = {v: k for k, v in MODE_FOR_TASK.items()}


# -- gen-data --------------------------------------------------------------------


def _point_spec(cfg):
    if cfg.point_preset == "two-moons":
        return datamod.TwoMoonsSpec(noise_sigma=cfg.moons_noise)
    return datamod.GaussianMixtureSpec.symmetric_pair(cfg.point_distance, cfg.point_sigma)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    _echo_config(cfg, args.out)
    seed = cfg.seed
    if cfg.task == "points":
        spec = _point_spec(cfg)
        train = datamod.gen_point_dataset(spec, cfg.n_train, seed)
        eval_in = datamod.gen_point_dataset(spec, cfg.n_eval, seed + 1)
        eval_out = datamod.gen_annulus_outliers(cfg.n_eval_outliers, seed + 2,
                                                r_min=cfg.outlier_r_min, r_max=cfg.outlier_r_max)
        manifest = {"seed": seed, "n_train": cfg.n_train, "n_eval": cfg.n_eval,
                    "n_eval_outliers": cfg.n_eval_outliers, "preset": cfg.point_preset,
                    "outlier_region": [cfg.outlier_r_min, cfg.outlier_r_max]}
        datamod.save_point_corpus(args.out, train, eval_in, eval_out, manifest)
    else:
        layout = datamod.SceneLayout(size=cfg.image_size)
        inlier_bank = datamod.default_inlier_bank()[: cfg.classes]
        if len(inlier_bank) < cfg.classes:
            raise ValueError(f"default texture bank has only {len(inlier_bank)} classes")
        outlier_bank = datamod.default_outlier_bank()
        train_images, train_labels = datamod.gen_scene_corpus(cfg.n_train, seed, inlier_bank, layout)
        eval_images, eval_labels, eval_masks = datamod.gen_eval_corpus(
            cfg.n_eval, seed + 100000, inlier_bank, outlier_bank, layout)
        manifest = {"seed": seed, "n_train": cfg.n_train, "n_eval": cfg.n_eval,
                    "num_classes": cfg.classes, "image_size": cfg.image_size,
                    "inlier_bank": datamod.texture_bank_to_json(inlier_bank),
                    "outlier_bank": datamod.texture_bank_to_json(outlier_bank)}
        datamod.save_scene_corpus(args.out, train_images, train_labels,
                                  eval_images, eval_labels, eval_masks, manifest)
    print(f"corpus written to {args.out}")
    return 0


# -- train -----------------------------------------------------------------------


def _train_config(cfg) -> joint.TrainConfig:
    return joint.TrainConfig(
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        lam=cfg.lam,
        n_out=cfg.n_out or None,
        outlier_sizes=cfg.outlier_sizes,
        paste_outliers=cfg.paste,
        classifier_lr=cfg.classifier_lr,
        classifier_lr_min=cfg.classifier_lr_min,
        classifier_schedule=cfg.classifier_schedule,
        flow_lr=cfg.flow_lr,
        seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every,
    )


def _build_models(cfg, corpus):
    if corpus.kind == "points":
        num_classes = int(corpus.manifest["num_classes"])
        model = clf.MLPClassifier(2, num_classes, hidden=cfg.clf_hidden, seed=(cfg.seed, 1))
        flow_cfg = flowmod.FlowConfig(
            in_channels=2, res_blocks=cfg.flow_res_blocks, hidden_channels=cfg.flow_hidden,
            squeeze_count=cfg.flow_squeeze, couplings_per_scale=cfg.flow_couplings,
            dequant_levels=cfg.flow_dequant_levels, point_mode=True)
    else:
        num_classes = int(corpus.manifest["num_classes"])
        model = clf.DenseClassifier(3, num_classes, base=cfg.clf_base, seed=(cfg.seed, 1))
        flow_cfg = flowmod.FlowConfig(
            in_channels=3, res_blocks=cfg.flow_res_blocks, hidden_channels=cfg.flow_hidden,
            squeeze_count=cfg.flow_squeeze, couplings_per_scale=cfg.flow_couplings,
            dequant_levels=cfg.flow_dequant_levels)
    flow = flowmod.FlowModel(flow_cfg, seed=(cfg.seed, 2))
    return model, flow


def _save_train_state(path, mode, cfg, model, flow, state: joint.LoopState) -> None:
    arrays = {}
    for name, arr in model.params.state().items():
        arrays[f"classifier/{name}"] = arr
    for name, arr in state.opt_classifier.moment_state().items():
        arrays[f"opt_c/{name}"] = arr
    if flow is not None:
        for name, arr in flow.params.state().items():
            arrays[f"flow/{name}"] = arr
        for name, arr in state.opt_flow.moment_state().items():
            arrays[f"opt_f/{name}"] = arr
    meta = {
        "kind": "train_state",
        "mode": mode,
        "iteration": state.iteration,
        "classifier": {"descriptor": model.descriptor, "dtype": model.dtype.str},
        "flow": None if flow is None else {"config": asdict(flow.config),
                                           "dtype": flow.dtype.str},
        "steps": {"classifier": state.opt_classifier.step_count,
                  "flow": state.opt_flow.step_count if flow is not None else 0},
        "rngs": {name: generator_state(rng) for name, rng in state.rngs.items()},
        "config": cfgmod.format_effective(cfg),
    }
    save_checkpoint(path, arrays, meta)


def _load_train_state(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path}: not a training checkpoint")
    cfg = cfgmod.resolve(cfgmod.parse_config_text(meta["config"]))
    model = clf.classifier_from_state(
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("classifier/")},
        meta["classifier"])
    flow = None
    if meta["flow"] is not None:
        flow = flowmod.flow_from_state(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("flow/")},
            meta["flow"])
    train_cfg = _train_config(cfg)
    state = joint.fresh_loop_state(train_cfg, model, flow)
    state.iteration = int(meta["iteration"])
    state.opt_classifier.load_moment_state(
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("opt_c/")},
        int(meta["steps"]["classifier"]))
    if flow is not None:
        state.opt_flow.load_moment_state(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("opt_f/")},
            int(meta["steps"]["flow"]))
    state.rngs = {name: generator_from_state(st) for name, st in meta["rngs"].items()}
    return model, flow, state, cfg, meta


def cmd_train(args) -> int:
    resume = None
    if args.checkpoint is not None:
        model, flow, state, cfg, meta = _load_train_state(args.checkpoint)
        resume = state
        mode = meta["mode"]
        if args.mode and args.mode != mode:
            raise ValueError(f"checkpoint was trained in mode {mode!r}, not {args.mode!r}")
    else:
        cfg = _load_cfg(args)
        if cfg.data_dir is None:
            raise ValueError("config key data_dir is required for training")
    if cfg.data_dir is None or not Path(cfg.data_dir).exists():
        raise FileNotFoundError(f"corpus directory {cfg.data_dir!r} does not exist")
    corpus = datamod.load_corpus(cfg.data_dir)
    mode = MODE_FOR_TASK[corpus.kind]
    if args.mode and args.mode != mode:
        raise ValueError(f"corpus {cfg.data_dir} is for mode {mode!r}, not {args.mode!r}")
    _echo_config(cfg, args.out)
    if resume is None:
        model, flow = _build_models(cfg, corpus)
        if mode == "dense" and not cfg.paste:
            flow = None  # plain closed-set baseline; nothing for a flow to fit
    train_cfg = _train_config(cfg)

    def checkpoint_cb(state: joint.LoopState) -> None:
        name = "ckpt_final.bin" if state.iteration == train_cfg.iterations \
            else f"ckpt_{state.iteration:06d}.bin"
        _save_train_state(args.out / name, mode, cfg, model, flow, state)

    log_path = args.out / "train_log.csv"
    with joint.TrainLogWriter(log_path) as log:
        if mode == "imagewide":
            joint.train_imagewide(train_cfg, model, flow, corpus.train["points"],
                                  corpus.train["labels"], log=log, state=resume,
                                  checkpoint_cb=checkpoint_cb)
        else:
            joint.train_dense(train_cfg, model, flow, corpus.train["images"],
                              corpus.train["labels"], log=log, state=resume,
                              checkpoint_cb=checkpoint_cb)
    print(f"training complete; log at {log_path}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model, flow, _, ckpt_cfg, meta = _load_train_state(args.checkpoint)
    cfg = ckpt_cfg
    if args.config is not None or args.seed is not None:
        cfg = _load_cfg(args, extra_overrides={"task": TASK_FOR_MODE[meta["mode"]]})
        if cfg.data_dir is None:
            cfg.data_dir = ckpt_cfg.data_dir
    temps = cfgmod._float_tuple(args.temps) if args.temps else cfg.temps
    scorings = cfgmod.scoring_list(cfg)
    if cfg.data_dir is None or not Path(cfg.data_dir).exists():
        raise FileNotFoundError(f"corpus directory {cfg.data_dir!r} does not exist")
    corpus = datamod.load_corpus(cfg.data_dir)
    if MODE_FOR_TASK[corpus.kind] != meta["mode"]:
        raise ValueError(f"checkpoint mode {meta['mode']!r} does not match corpus kind {corpus.kind!r}")
    _echo_config(cfg, args.out)
    if meta["mode"] == "imagewide":
        blocks = evaluate.evaluate_imagewide(model, corpus.eval["points"], corpus.eval["labels"],
                                             corpus.eval["outliers"], temps, scorings)
        logits_in = clf.predict_logits(model, corpus.eval["points"])
        logits_out = clf.predict_logits(model, corpus.eval["outliers"])
        for scoring in scorings:
            for t in temps:
                fn = clf.SCORING_FUNCTIONS[scoring]
                s = np.concatenate([fn(clf.softmax_with_temperature(logits_in, t)),
                                    fn(clf.softmax_with_temperature(logits_out, t))])
                clf.save_score_maps(args.out / f"scores_{scoring}_T{t:g}.bin", s[:, None, None],
                                    scoring, t)
        labels = np.concatenate([np.zeros(len(logits_in)), np.ones(len(logits_out))])
        tensorio.write_tensor_map(args.out / "eval_labels.bin", labels)
    else:
        blocks, maps = evaluate.evaluate_dense(model, corpus.eval["images"], corpus.eval["labels"],
                                               corpus.eval["masks"], temps, scorings)
        for name, score_map in maps.items():
            scoring, t = name.split(" T=")
            clf.save_score_maps(args.out / f"scores_{scoring}_T{t}.bin", score_map,
                                scoring, float(t))
        tensorio.write_tensor_map(args.out / "eval_labels.bin", corpus.eval["labels"].astype(np.float32))
        tensorio.write_tensor_map(args.out / "eval_masks.bin", corpus.eval["masks"].astype(np.float32))
    report = metrics.format_report(blocks)
    (args.out / "report.txt").write_text(report)
    print(report, end="")
    return 0


# -- sample ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    arrays, meta = load_checkpoint(args.checkpoint)
    if meta.get("kind") == "train_state":
        if meta["flow"] is None:
            raise ValueError("checkpoint holds no flow to sample from")
        flow = flowmod.flow_from_state(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("flow/")},
            meta["flow"])
        embedded = meta["config"]
    elif meta.get("kind") == "flow":
        flow = flowmod.flow_from_state(arrays, meta)
        embedded = None
    else:
        raise ValueError(f"{args.checkpoint}: no flow found")
    if args.config is None and embedded is not None:
        cfg = cfgmod.resolve(cfgmod.parse_config_text(embedded), {"seed": args.seed})
    else:
        cfg = _load_cfg(args)
    _echo_config(cfg, args.out)
    if flow.config.point_mode:
        raise ValueError("point-mode flows have no image samples to write")
    rng = np.random.default_rng(cfg.seed)
    for size in cfg.sample_sizes:
        samples = flowmod.sample(flow, cfg.sample_n, (size, size), rng=rng)
        samples = np.clip(samples, 0.0, 1.0)
        for i in range(cfg.sample_n):
            tensorio.write_ppm(args.out / f"sample_{size}x{size}_{i:03d}.ppm", samples[i])
    print(f"samples written to {args.out}")
    return 0


# -- gradcheck ---------------------------------------------------------------------


def _gradcheck_suite():
    """Tiny float64 models exercising each training loss end to end."""
    rng = np.random.default_rng(11)

    # compound image-wide loss: gradient reaches classifier and flow
    mlp = clf.MLPClassifier(2, 3, hidden=6, seed=3, dtype=np.float64)
    for name, t in mlp.params.items():
        if name.startswith("w2"):
            t.data = rng.standard_normal(t.data.shape) * 0.3
    pflow = flowmod.FlowModel(
        flowmod.FlowConfig(in_channels=2, res_blocks=1, hidden_channels=5,
                           squeeze_count=0, couplings_per_scale=2, point_mode=True),
        seed=4, dtype=np.float64)
    for name, t in pflow.params.items():
        if name.endswith("/out_w") or name.endswith("/out_b"):
            t.data = rng.standard_normal(t.data.shape) * 0.1
    x_pts = rng.standard_normal((4, 2))
    y_pts = np.array([0, 1, 2, 1])
    z_pts = rng.standard_normal((4, 2))

    joint_params_a = _merged_params(mlp.params, pflow.params)

    def compound_program(params, *_):
        from .autodiff import Tensor as T
        from .joint import _log_softmax, _kl_uniform_map
        from . import autodiff as ad
        logp = _log_softmax(mlp.logits_t(T(x_pts)))
        ce = -(ad.gather_class(logp, y_pts).mean())
        x_out = pflow.inverse_t(T(z_pts), (1, 1))
        kl = _kl_uniform_map(_log_softmax(mlp.logits_t(x_out))).mean()
        return ce + kl * 1.0

    # flow likelihood loss on an image-mode flow with the logit pre-transform
    iflow = flowmod.FlowModel(
        flowmod.FlowConfig(in_channels=2, res_blocks=1, hidden_channels=4,
                           squeeze_count=1, couplings_per_scale=2, dequant_levels=16),
        seed=5, dtype=np.float64)
    for name, t in iflow.params.items():
        if name.endswith("/out_w") or name.endswith("/out_b"):
            t.data = rng.standard_normal(t.data.shape) * 0.05
    x_img = (np.floor(rng.random((2, 2, 4, 4)) * 16) + rng.random((2, 2, 4, 4))) / 16.0

    def nll_program(params, *_):
        from .autodiff import Tensor as T
        return -(iflow.log_likelihood_t(T(x_img)).mean())

    # dense loss through sampling and pasting into tiny crops
    dense = clf.DenseClassifier(2, 3, base=4, seed=6, dtype=np.float64)
    for name, t in dense.params.items():
        if name.startswith("head_"):
            t.data = rng.standard_normal(t.data.shape) * 0.2
    crops = rng.random((2, 2, 8, 8))
    labels = rng.integers(0, 3, (2, 8, 8))
    labels[0, 0, 0] = 255
    z_img = rng.standard_normal((2, iflow.latent_dim((4, 4))))
    tops = np.array([1, 3])
    lefts = np.array([2, 0])
    s_mask = np.zeros((2, 8, 8), dtype=np.int64)
    for i in range(2):
        s_mask[i, tops[i]:tops[i] + 4, lefts[i]:lefts[i] + 4] = 1

    def dense_program(params, *_):
        from .autodiff import Tensor as T
        from . import autodiff as ad
        from .joint import dense_openset_loss, _clamp01
        x_ood = _clamp01(iflow.inverse_t(T(z_img), (4, 4)))
        x_in = ad.overlay(crops, x_ood, tops, lefts)
        return dense_openset_loss(dense, x_in, labels, s_mask, 0.5).total

    joint_params_b = _merged_params(dense.params, iflow.params)
    return [
        ("compound-classifier-loss", compound_program, joint_params_a),
        ("flow-likelihood-loss", nll_program, iflow.params),
        ("dense-openset-loss", dense_program, joint_params_b),
    ]


class _MergedParams:
    """Read-only view over several ParameterSets for joint grad checks."""

    def __init__(self, *sets):
        self._sets = sets

    def items(self):
        for i, s in enumerate(self._sets):
            for name, t in s.items():
                yield f"set{i}/{name}", t

    def zero_grad(self):
        for s in self._sets:
            s.zero_grad()


def _merged_params(*sets):
    return _MergedParams(*sets)


def cmd_gradcheck(args) -> int:
    tolerance = 1e-4
    lines = []
    ok = True
    for name, program, params in _gradcheck_suite():
        report = gradcheck.finite_difference_check(program, params, step=1e-5,
                                                   tolerance=tolerance)
        lines.append(f"{name}: {report.summary()}")
        ok = ok and report.passed
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if getattr(args, "out", None):
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.txt").write_text(text)
    return 0 if ok else 1


# -- entry point -------------------------------------------------------------------


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "sample": cmd_sample,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except Exception as err:  # deterministic nonzero exit on any failure
        print(f"error: {err}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
