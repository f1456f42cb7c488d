"""Command-line entry point: data, training, sampling, evaluation, acceptance."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np
import torch

from . import data, diffusion, metrics, render, training
from .layout import CategorySet, Layout, LayoutElement, tokenize
from .model import ConditionalDenoiser, ModelConfig, PRESETS, count_parameters, preset_config
from .saliency import extract_boxes, salient_boxes
from .training import TrainConfig, for_task, train_preset

ENV_OUT = "LAYOUTGEN_OUT"
ENV_THREADS = "LAYOUTGEN_THREADS"

# the acceptance pipeline always trains on the same synthetic corpus draw
CORPUS_SEED = 11
HELD_SEED = 12

MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


class CliError(ValueError):
    """Bad flag/config combination detected before running."""


def _apply_env():
    """LAYOUTGEN_THREADS pins the torch CPU thread count."""
    value = os.environ.get(ENV_THREADS)
    if value:
        torch.set_num_threads(int(value))


def _resolve_out(flag_value: str | None) -> str:
    """LAYOUTGEN_OUT overrides the --out flag."""
    out = os.environ.get(ENV_OUT) or flag_value
    if not out:
        raise CliError("no output directory: pass --out or set LAYOUTGEN_OUT")
    return out


def _log_config(command: str, resolved: dict, log=print):
    log(f"{command} config {json.dumps(resolved, sort_keys=True, default=str)}")


def read_config_file(path: str) -> dict:
    """Flat key = value lines; '#' comments and blanks ignored."""
    kv = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return kv


def _coerce(value: str, target_type: str):
    t = str(target_type)
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


def resolve_train_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    """Precedence: flags > config file > preset defaults."""
    file_kv = read_config_file(args.config) if args.config else {}
    model_over, train_over = {}, {}
    for key, value in file_kv.items():
        if key in MODEL_FIELDS:
            model_over[key] = _coerce(value, MODEL_FIELDS[key])
        elif key in TRAIN_FIELDS:
            train_over[key] = _coerce(value, TRAIN_FIELDS[key])
        else:
            raise CliError(f"unknown config key {key!r} in {args.config}")

    task = args.task or train_over.pop("task", None) or "uncond"
    model_cfg = preset_config(args.preset, **model_over)
    train_cfg = for_task(train_preset(args.preset), task)
    if train_over:
        train_cfg = dataclasses.replace(train_cfg, **train_over)
    flag_over = {
        name: getattr(args, name)
        for name in ("epochs", "batch_size", "learning_rate", "seed", "t_sampling", "timesteps")
        if getattr(args, name, None) is not None
    }
    if flag_over:
        train_cfg = dataclasses.replace(train_cfg, **flag_over)
    resolved = {
        "preset": args.preset,
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
    }
    return model_cfg, train_cfg, resolved


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    out = _resolve_out(args.out)
    _log_config("gen-data", {"n": args.n, "seed": args.seed, "out": out})
    manifest = data.generate_synthetic(args.n, args.seed, out)
    counts = {split: len(manifest.ids(split)) for split in ("train", "val", "test")}
    print(f"wrote {len(manifest.samples)} samples to {out} (splits {counts})")
    return 0


def cmd_ingest(args) -> int:
    _log_config("ingest", {"root": args.root, "seed": args.seed, "n_max": args.n_max})
    manifest = data.ingest(args.root, seed=args.seed, n_max=args.n_max, log=print)
    print(f"manifest: {len(manifest.samples)} samples kept, {manifest.n_dropped} dropped")
    return 0


def cmd_train(args) -> int:
    _apply_env()
    model_cfg, train_cfg, resolved = resolve_train_configs(args)
    out = _resolve_out(args.out)
    resolved["out"] = out
    resolved["corpus"] = args.corpus
    _log_config("train", resolved)

    manifest = data.CorpusManifest.from_json(os.path.join(args.corpus, "manifest.json"))
    if manifest.cats.n_categories != model_cfg.n_categories:
        model_cfg = dataclasses.replace(model_cfg, n_categories=manifest.cats.n_categories)
        print(f"note: n_categories set to {model_cfg.n_categories} to match the corpus")
    train_tc = data.TensorCorpus.load(
        args.corpus, manifest, "train", model_cfg.img_h, model_cfg.img_w, n_max=model_cfg.n_max
    )
    val_tc = None
    if train_cfg.val_interval and manifest.ids("val"):
        val_tc = data.TensorCorpus.load(
            args.corpus, manifest, "val", model_cfg.img_h, model_cfg.img_w, n_max=model_cfg.n_max
        )
    torch.manual_seed(train_cfg.seed)
    model = ConditionalDenoiser(model_cfg)
    print(f"model: {count_parameters(model):,} parameters")
    final = training.train(
        train_tc, train_cfg, model, out, val_corpus=val_tc, resume_from=args.resume, log=print
    )
    print(f"final checkpoint: {final}")
    return 0


def _load_pairs(corpus_root: str, manifest: data.CorpusManifest, split: str):
    bundles = data.load_split_bundles(corpus_root, manifest, split)
    layouts = data.load_split_layouts(corpus_root, manifest, split)
    return bundles, layouts


def cmd_sample(args) -> int:
    _apply_env()
    out = _resolve_out(args.out)
    resolved = {
        "ckpt": args.ckpt, "corpus": args.corpus, "split": args.split, "n": args.n,
        "steps": args.steps, "plan": args.plan, "task": args.task, "seed": args.seed,
        "var": args.var, "out": out,
    }
    _log_config("sample", resolved)

    payload = training.load_checkpoint(args.ckpt)
    model = training.restore_model(payload)
    sched = training.restore_schedule(payload)
    manifest = data.CorpusManifest.from_json(os.path.join(args.corpus, "manifest.json"))
    cats = manifest.cats
    bundles, gt_layouts = _load_pairs(args.corpus, manifest, args.split)
    n = args.n if args.n is not None else len(bundles)
    if n > len(bundles):
        raise CliError(f"asked for {n} samples but split {args.split!r} has {len(bundles)}")
    bundles, gt_layouts = bundles[:n], gt_layouts[:n]

    os.makedirs(os.path.join(out, "layouts"), exist_ok=True)
    os.makedirs(os.path.join(out, "renders"), exist_ok=True)
    plan = diffusion.make_plan(sched, args.steps, args.plan)
    for i, (bundle, gt) in enumerate(zip(bundles, gt_layouts)):
        rng = np.random.default_rng([args.seed, i])
        cond = data.prepare_conditioning(bundle, model.cfg.img_h, model.cfg.img_w)
        if args.task == "refine":
            noisy = diffusion.perturb_layout(gt, rng, var=args.var)
            layout = diffusion.refine(
                model, cond, noisy, sched, cats, rng, n_max=model.cfg.n_max, var=args.var
            )
        else:
            mask = diffusion.task_mask(
                args.task, tokenize(gt, cats, n_max=model.cfg.n_max), cats.n_categories, rng
            )
            layout = diffusion.sample(model, cond, plan, sched, cats, mask=mask, rng=rng)
        data.save_layout_json(os.path.join(out, "layouts", f"{bundle.id}.json"), layout, cats)
        render.render_to_file(
            os.path.join(out, "renders", f"{bundle.id}.png"), layout, bundle.canvas, cats
        )
    print(f"wrote {len(bundles)} layouts and renders to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest_path = os.path.join(args.bundles, "manifest.json")
    cats = (
        data.CorpusManifest.from_json(manifest_path).cats
        if os.path.exists(manifest_path)
        else CategorySet.poster()
    )
    _log_config("eval", {
        "layouts": args.layouts, "bundles": args.bundles, "out": args.out, "oracle": args.oracle,
    })
    ids = sorted(
        name[: -len(".json")] for name in os.listdir(args.layouts) if name.endswith(".json")
    )
    if not ids:
        raise CliError(f"no layout .json files under {args.layouts}")
    layouts = [data.load_layout_json(os.path.join(args.layouts, f"{sid}.json"), cats) for sid in ids]
    bundles = [data.load_bundle(args.bundles, sid) for sid in ids]
    report = metrics.evaluate_corpus(layouts, bundles, cats)
    payload = dict(report.summary_dict(), per_layout=report.per_layout)
    if args.oracle == "pixel512":
        check = metrics.pixel_crosscheck(layouts, bundles, cats, grid=512)
        payload["pixel_oracle"] = check["grid"]
        payload["oracle_abs_delta"] = check["abs_delta"]
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    for key in ("occ", "rea", "und_l", "und_s", "ove", "sma", "uti"):
        value = payload[key]
        print(f"{key:6s} {'n/a' if value is None else f'{value:.4f}'}")
    print(f"report: {args.out}")
    return 0


def cmd_extract_boxes(args) -> int:
    _log_config("extract-boxes", {
        "saliency": args.saliency, "threshold": args.threshold, "out": args.out,
    })
    pixels = data.load_image(args.saliency)
    if pixels.ndim != 2:
        raise CliError(f"saliency must be single-channel, got shape {pixels.shape}")
    boxes = salient_boxes(pixels, s=args.threshold)
    payload = {"threshold": args.threshold, "boxes": [list(b) for b in boxes.boxes]}
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    print(f"{len(boxes.boxes)} boxes -> {args.out}")
    return 0


def cmd_render(args) -> int:
    _log_config("render", {"layout": args.layout, "canvas": args.canvas, "out": args.out})
    cats = CategorySet.poster()
    layout = data.load_layout_json(args.layout, cats)
    canvas = data.load_image(args.canvas)
    render.render_to_file(args.out, layout, canvas, cats)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# acceptance pipeline


def _random_layout(rng, cats: CategorySet) -> Layout:
    n = int(rng.integers(2, 8))
    els = []
    for _ in range(n):
        cat = int(rng.integers(1, cats.n_categories))
        w, h = rng.uniform(0.05, 0.5, 2)
        x = rng.uniform(w / 2, 1 - w / 2)
        y = rng.uniform(h / 2, 1 - h / 2)
        els.append(LayoutElement(category=cat, box=(float(x), float(y), float(w), float(h))))
    return Layout(elements=tuple(els))


def _smooth_map(rng, h=24, w=16) -> np.ndarray:
    base = rng.random((h, w))
    for _ in range(2):
        padded = np.pad(base, 1, mode="edge")
        base = sum(
            padded[i : i + h, j : j + w] for i in range(3) for j in range(3)
        ) / 9.0
    return np.clip(base, 0.0, 1.0)


def _criterion_metric_grid(seed: int, n_layouts: int) -> dict:
    cats = CategorySet.poster()
    rng = np.random.default_rng([seed, 1])
    layouts = [_random_layout(rng, cats) for _ in range(n_layouts)]

    class _B:
        def __init__(self, i, saliency):
            self.id = str(i)
            self.saliency = saliency
            self.canvas = np.zeros((4, 4, 3))

    bundles = [_B(i, _smooth_map(rng)) for i in range(n_layouts)]
    check = metrics.pixel_crosscheck(layouts, bundles, cats, grid=512)
    deltas = {k: v for k, v in check["abs_delta"].items() if v is not None}
    worst = max(deltas.values())
    return {
        "passed": bool(worst < 1e-2),
        "details": {"n_layouts": n_layouts, "max_abs_delta": worst, "tolerance": 1e-2},
    }


def _criterion_diffusion(seed: int) -> dict:
    sched = diffusion.make_schedule(200)
    checks = {}
    checks["alpha_bar_decreasing"] = bool(np.all(np.diff(sched.alpha_bars) < 0))

    rng = np.random.default_rng([seed, 2])
    n = 10_000
    x0 = 0.5
    marginal_ok = True
    compose_ok = True
    for t in (1, sched.T // 2, sched.T):
        ab = float(sched.alpha_bars[t])
        want_mean = np.sqrt(ab) * x0
        want_var = 1.0 - ab
        draws = diffusion.forward_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        mean_tol = 3 * np.sqrt(want_var / n)
        var_tol = 3 * want_var * np.sqrt(2.0 / (n - 1))
        marginal_ok &= abs(draws.mean() - want_mean) < mean_tol
        marginal_ok &= abs(draws.var() - want_var) < var_tol

        # stepwise kernel composition reaches the same marginal
        x = np.full(n, x0)
        for s in range(1, t + 1):
            beta = float(sched.betas[s])
            x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * rng.standard_normal(n)
        compose_ok &= abs(x.mean() - want_mean) < mean_tol
        compose_ok &= abs(x.var() - want_var) < var_tol
    checks["marginal_3sigma"] = bool(marginal_ok)
    checks["stepwise_composition_3sigma"] = bool(compose_ok)

    x0_arr = rng.standard_normal((11, 8)) * 0.7
    t = 137
    eps = rng.standard_normal((11, 8))
    x_t = diffusion.forward_sample(x0_arr, t, eps, sched)
    ab = float(sched.alpha_bars[t])
    recovered = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    inv_err = float(np.abs(recovered - x0_arr).max())
    checks["eps_inversion_1e6"] = bool(inv_err < 1e-6)
    return {
        "passed": all(checks.values()),
        "details": dict(checks, inversion_max_err=inv_err),
    }


def _toy_config() -> ModelConfig:
    return ModelConfig(
        d_model=8, n_heads=2, enc_layers=1, dec_layers=1, img_layers=1, cgbfp_layers=1,
        ffn_layout=16, ffn_img=16, ffn_cgbfp=16, cgbfp_queries=2,
        patch_size=4, img_h=8, img_w=8, n_max=2, n_categories=3,
    )


def fd_gradient_report(seed: int = 0, entries_per_param: int = 2, h: float = 1e-5) -> dict:
    """Central-difference vs autograd over every parameter tensor of a toy model."""
    cfg = _toy_config()
    torch.manual_seed(seed)
    model = ConditionalDenoiser(cfg).double()
    with torch.no_grad():
        model.head.weight.normal_(0, 0.02, generator=torch.Generator().manual_seed(seed + 1))
    model.eval()

    g = torch.Generator().manual_seed(seed + 2)
    x_t = torch.randn(2, cfg.n_max, cfg.n_channels, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 7])
    images = torch.rand(2, 4, cfg.img_h, cfg.img_w, generator=g, dtype=torch.float64)
    boxes = [np.random.default_rng(seed + 3).random((2, 4)), np.zeros((0, 4))]
    eps = torch.randn(2, cfg.n_max, cfg.n_channels, generator=g, dtype=torch.float64)

    def objective():
        eps_hat, omega = model(x_t, t, images, boxes)
        return training.loss(eps, eps_hat) + 0.1 * omega.mean()

    model.zero_grad()
    objective().backward()

    entry_rng = np.random.default_rng(seed + 4)
    worst = 0.0
    checked = 0
    for _, param in model.named_parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        picks = entry_rng.choice(flat.numel(), size=min(entries_per_param, flat.numel()), replace=False)
        for idx in picks:
            idx = int(idx)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(objective())
                flat[idx] = orig - h
                down = float(objective())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            ag = float(grad[idx])
            worst = max(worst, abs(fd - ag) / max(abs(ag), abs(fd), 1e-6))
            checked += 1
    return {"max_rel_err": worst, "entries_checked": checked, "tolerance": 1e-4}


def _criterion_gradients(seed: int) -> dict:
    report = fd_gradient_report(seed=seed)
    return {"passed": bool(report["max_rel_err"] < 1e-4), "details": report}


def _criterion_omega(seed: int) -> dict:
    cfg = preset_config("desk")
    torch.manual_seed(seed)
    model = ConditionalDenoiser(cfg)
    with torch.no_grad():
        model.head.weight.normal_(0, 0.02, generator=torch.Generator().manual_seed(seed))
    model.eval()

    g = torch.Generator().manual_seed(seed + 1)
    x_t = torch.randn(2, cfg.n_max, cfg.n_channels, generator=g)
    t = torch.tensor([5, 60])
    boxes = [np.random.default_rng(seed).random((3, 4)), np.zeros((0, 4))]
    t_emb = model.embed_timestep(t)
    f_layout = model.layout_encoder(x_t, t_emb)
    f_box, box_mask = model.bounding_encoder(boxes, x_t.device, x_t.dtype)
    f_img = model.image_encoder(torch.rand(2, 4, cfg.img_h, cfg.img_w, generator=g))
    noise_img = torch.randn(f_img.shape, generator=g)

    zero = torch.zeros(2)
    at_zero_a = model.decode(f_layout, f_img, f_box, box_mask, zero, t_emb)
    at_zero_b = model.decode(f_layout, noise_img, f_box, box_mask, zero, t_emb)
    invariant = at_zero_a.detach().numpy().tobytes() == at_zero_b.detach().numpy().tobytes()

    pos = torch.full((2,), 0.7)
    at_pos_a = model.decode(f_layout, f_img, f_box, box_mask, pos, t_emb)
    at_pos_b = model.decode(f_layout, noise_img, f_box, box_mask, pos, t_emb)
    sensitive = not torch.equal(at_pos_a, at_pos_b)
    return {
        "passed": bool(invariant and sensitive),
        "details": {"bitwise_invariant_at_zero": invariant, "changes_at_positive": sensitive},
    }


def _criterion_constrained(model, sched, cats, bundles, gt_layouts, seed: int, n_samples: int, steps: int) -> dict:
    plan = diffusion.make_plan(sched, steps, "quad")
    per_task = {}
    for task_idx, task in enumerate(("c_to_sp", "cs_to_p", "completion")):
        exact = 0
        for i in range(n_samples):
            bundle = bundles[i % len(bundles)]
            gt = gt_layouts[i % len(gt_layouts)]
            rng = np.random.default_rng([seed, 5, task_idx, i])
            reference = tokenize(gt, cats, n_max=model.cfg.n_max)
            mask = diffusion.task_mask(task, reference, cats.n_categories, rng)
            cond = data.prepare_conditioning(bundle, model.cfg.img_h, model.cfg.img_w)
            _, tensor = diffusion.sample(
                model, cond, plan, sched, cats, mask=mask, rng=rng, return_tensor=True
            )
            frozen = mask.mask == 1
            if np.array_equal(tensor[frozen], reference[frozen]):
                exact += 1
        per_task[task] = {"exact": exact, "n": n_samples}
    passed = all(v["exact"] == v["n"] for v in per_task.values())
    return {"passed": passed, "details": per_task}


def _loss_ratio(log_path: str, window: int = 20) -> tuple[float, float, float]:
    losses = []
    with open(log_path) as f:
        for line in f:
            record = json.loads(line)
            if "loss" in record:
                losses.append(record["loss"])
    head = float(np.mean(losses[:window]))
    tail = float(np.mean(losses[-window:]))
    return head, tail, tail / head


def run_acceptance(seed: int, out_dir: str, quick: bool = False, log=print) -> dict:
    """Execute the desk-scale acceptance pipeline; returns the report dict.

    quick shrinks corpus/training/sampling sizes so two runs can be compared
    quickly; thresholds stay the same and the training-dependent criteria
    may fail at quick sizes (documented in the report).
    """
    t_start = time.monotonic()
    _apply_env()
    if not os.environ.get(ENV_THREADS):
        torch.set_num_threads(1)  # keep runs bitwise comparable
    os.makedirs(out_dir, exist_ok=True)
    sizes = (
        dict(n_metric=20, corpus_n=24, held_n=6, epochs=12, steps=10, n_constrained=6, n_masks=50)
        if quick
        else dict(n_metric=100, corpus_n=256, held_n=64, epochs=430, steps=25, n_constrained=50, n_masks=200)
    )
    _log_config("accept", dict(seed=seed, quick=quick, out=out_dir, **sizes), log=log)
    criteria = []

    def add(number, name, result):
        entry = dict(criterion=number, name=name, **result)
        criteria.append(entry)
        log(f"[{number}] {name}: {'PASS' if entry['passed'] else 'FAIL'}")

    add(1, "metric grid equivalence", _criterion_metric_grid(seed, sizes["n_metric"]))
    add(2, "diffusion math", _criterion_diffusion(seed))
    add(3, "gradient correctness", _criterion_gradients(seed))
    add(4, "omega ablation", _criterion_omega(seed))

    # end-to-end experiment: corpus, training, held-out sampling. The corpus
    # draw is pinned (same data every run); --seed drives init, training,
    # constraint masks, and sampling.
    cats = CategorySet.poster()
    corpus_dir = os.path.join(out_dir, "corpus")
    held_dir = os.path.join(out_dir, "held")
    manifest = data.generate_synthetic(sizes["corpus_n"], CORPUS_SEED, corpus_dir)
    held_manifest = data.generate_synthetic(sizes["held_n"], HELD_SEED, held_dir)

    model_cfg = preset_config("desk")
    train_cfg = train_preset("desk", seed=seed, epochs=sizes["epochs"])
    train_tc = data.TensorCorpus.load(
        corpus_dir, manifest, "train", model_cfg.img_h, model_cfg.img_w, n_max=model_cfg.n_max
    )
    torch.manual_seed(train_cfg.seed)
    model = ConditionalDenoiser(model_cfg)
    ckpt_dir = os.path.join(out_dir, "ckpt")
    final_ckpt = training.train(train_tc, train_cfg, model, ckpt_dir, log=log)
    model.eval()
    sched = training.restore_schedule(training.load_checkpoint(final_ckpt))
    head, tail, ratio = _loss_ratio(os.path.join(ckpt_dir, "train_log.jsonl"))

    held_ids = held_manifest.ids()
    held_bundles = [data.load_bundle(held_dir, sid) for sid in held_ids]
    held_layouts = [
        data.load_layout_json(os.path.join(held_dir, "layouts", f"{sid}.json"), cats)
        for sid in held_ids
    ]

    add(
        5,
        "constrained exactness",
        _criterion_constrained(
            model, sched, cats, held_bundles, held_layouts, seed,
            sizes["n_constrained"], sizes["steps"],
        ),
    )

    plan = diffusion.make_plan(sched, sizes["steps"], "quad")
    sample_dir = os.path.join(out_dir, "samples")
    os.makedirs(os.path.join(sample_dir, "layouts"), exist_ok=True)
    os.makedirs(os.path.join(sample_dir, "renders"), exist_ok=True)
    generated = []
    for i, bundle in enumerate(held_bundles):
        rng = np.random.default_rng([seed, 6, i])
        cond = data.prepare_conditioning(bundle, model_cfg.img_h, model_cfg.img_w)
        layout = diffusion.sample(model, cond, plan, sched, cats, rng=rng)
        generated.append(layout)
        data.save_layout_json(os.path.join(sample_dir, "layouts", f"{bundle.id}.json"), layout, cats)
        render.render_to_file(
            os.path.join(sample_dir, "renders", f"{bundle.id}.png"), layout, bundle.canvas, cats
        )
    gen_report = metrics.evaluate_corpus(
        generated, held_bundles, cats, out_json=os.path.join(out_dir, "generated_metrics.json")
    )
    gt_report = metrics.evaluate_corpus(held_layouts, held_bundles, cats)
    gen = gen_report.summary_dict()
    occ_bound = 1.5 * gt_report.occ
    c6_checks = {
        "loss_ratio_lt_0.25": ratio < 0.25,
        "und_s_ge_0.85": gen["und_s"] is not None and gen["und_s"] >= 0.85,
        "ove_le_0.05": gen["ove"] is not None and gen["ove"] <= 0.05,
        "sma_le_0.02": gen["sma"] is not None and gen["sma"] <= 0.02,
        "occ_le_1.5x_gt": gen["occ"] is not None and gen["occ"] <= occ_bound,
    }
    add(
        6,
        "end-to-end synthetic experiment",
        {
            "passed": all(c6_checks.values()),
            "details": {
                "checks": {k: bool(v) for k, v in c6_checks.items()},
                "loss_head": head, "loss_tail": tail, "loss_ratio": ratio,
                "generated": {k: gen[k] for k in ("occ", "und_s", "ove", "sma", "uti")},
                "gt_occ": gt_report.occ, "occ_bound": occ_bound,
                "quick_sizes": quick,
            },
        },
    )

    closer = 0
    for i, (bundle, gt) in enumerate(zip(held_bundles, held_layouts)):
        rng = np.random.default_rng([seed, 7, i])
        noisy = diffusion.perturb_layout(gt, rng, var=0.01)
        cond = data.prepare_conditioning(bundle, model_cfg.img_h, model_cfg.img_w)
        refined = diffusion.refine(
            model, cond, noisy, sched, cats, rng, n_max=model_cfg.n_max, var=0.01
        )
        ref_t = tokenize(gt, cats, n_max=model_cfg.n_max)
        d_noisy = float(np.linalg.norm(tokenize(noisy, cats, n_max=model_cfg.n_max) - ref_t))
        d_refined = float(np.linalg.norm(tokenize(refined, cats, n_max=model_cfg.n_max) - ref_t))
        closer += d_refined < d_noisy
    frac = closer / len(held_bundles)
    add(
        7,
        "refinement recovery",
        {
            "passed": frac >= 0.8,
            "details": {"closer": closer, "n": len(held_bundles), "fraction": frac},
        },
    )

    rng = np.random.default_rng([seed, 8])
    mismatches = 0
    for _ in range(sizes["n_masks"]):
        mask = _smooth_map(rng, h=20, w=20) > rng.uniform(0.45, 0.7)
        got = extract_boxes(mask.astype(int), k_max=32, min_area=0.0)
        want = _component_boxes_oracle(mask, k_max=32, min_area=0.0)
        if got.boxes != want:
            mismatches += 1
    add(
        8,
        "salient box extraction vs exhaustive oracle",
        {"passed": mismatches == 0, "details": {"n_masks": sizes["n_masks"], "mismatches": mismatches}},
    )

    # in-run determinism probe; the full criterion is two whole runs compared
    # bitwise (see README), which this report supports by containing no
    # wall-clock values
    probe_bundle = held_bundles[0]
    cond = data.prepare_conditioning(probe_bundle, model_cfg.img_h, model_cfg.img_w)
    t1 = diffusion.sample(
        model, cond, plan, sched, cats, rng=np.random.default_rng([seed, 9]), return_tensor=True
    )[1]
    t2 = diffusion.sample(
        model, cond, plan, sched, cats, rng=np.random.default_rng([seed, 9]), return_tensor=True
    )[1]
    add(
        9,
        "determinism probe",
        {"passed": t1.tobytes() == t2.tobytes(), "details": {"repeat_sample_bitwise": t1.tobytes() == t2.tobytes()}},
    )

    report = {
        "seed": seed,
        "quick": quick,
        "criteria": criteria,
        "all_passed": all(c["passed"] for c in criteria),
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    log(f"acceptance {'PASSED' if report['all_passed'] else 'FAILED'} "
        f"({time.monotonic() - t_start:.1f}s, report at {os.path.join(out_dir, 'report.json')})")
    return report


def _component_boxes_oracle(mask: np.ndarray, k_max: int, min_area: float):
    """4-connected flood fill, min/max rectangle per component, same selection
    rules as extract_boxes; written independently of the scipy-based path."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            pixels = []
            while stack:
                rr, cc = stack.pop()
                pixels.append((rr, cc))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = rr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            comps.append(pixels)

    entries = []
    for pixels in comps:
        area = len(pixels)  # component pixel count, not rectangle area
        if area / (h * w) < min_area:
            continue
        rows = [p[0] for p in pixels]
        cols = [p[1] for p in pixels]
        r0, r1 = min(rows), max(rows) + 1
        c0, c1 = min(cols), max(cols) + 1
        first = min(pixels)
        box = (
            (c0 + c1) / 2 / w,
            (r0 + r1) / 2 / h,
            (c1 - c0) / w,
            (r1 - r0) / h,
        )
        entries.append((-area, first[0], first[1], box))
    entries.sort(key=lambda e: e[:3])
    return tuple(e[3] for e in entries[:k_max])


def cmd_accept(args) -> int:
    out = _resolve_out(args.out)
    report = run_acceptance(args.seed, out, quick=args.quick)
    return 0 if report["all_passed"] else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutgen",
        description="Content-aware layout generation: synthetic data, training, "
        "sampling, metrics, rendering.",
        epilog=f"Environment: {ENV_OUT} overrides output directories, "
        f"{ENV_THREADS} pins the torch thread count.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a verified synthetic corpus")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="validate a corpus directory and write its manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-max", type=int, default=11, dest="n_max")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a denoiser on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", default=None, help="flat key = value file, overrides preset")
    p.add_argument("--task", choices=("uncond", "c_to_sp", "cs_to_p", "completion"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None, dest="learning_rate")
    p.add_argument("--t-sampling", choices=("uniform", "quad"), default=None, dest="t_sampling")
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate layouts for corpus canvases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--plan", choices=("uniform", "quad"), default="quad")
    p.add_argument(
        "--task",
        choices=("uncond", "c_to_sp", "cs_to_p", "completion", "refine"),
        default="uncond",
    )
    p.add_argument("--var", type=float, default=0.01, help="refine perturbation variance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score layouts against their canvases")
    p.add_argument("--layouts", required=True)
    p.add_argument("--bundles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", choices=("off", "pixel512"), default="off")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-boxes", help="salient region boxes from a saliency map")
    p.add_argument("--saliency", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_boxes)

    p = sub.add_parser("render", help="draw a layout over a canvas")
    p.add_argument("--layout", required=True)
    p.add_argument("--canvas", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("accept", help="run the acceptance pipeline, print pass/fail table")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--quick", action="store_true", help="reduced sizes for smoke runs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_accept)

    return parser


def entry(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entry())
