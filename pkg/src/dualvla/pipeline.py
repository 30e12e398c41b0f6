"""Three-stage training, chunked closed-loop inference, and evaluation.

Stage 1 trains the latent action model and labels every episode. Stage 2
pretrains the backbone on a weighted robot/QA mixture: robot samples
contribute latent/discrete token cross-entropies plus the flow loss with
the gradient boundary truncated (the backbone never sees flow gradients);
QA samples contribute answer cross-entropy only and never touch the
expert. Stage 3 fine-tunes on robot data with gradients flowing from the
expert into the backbone and multi-sample noise per chunk.

Inference computes the backbone KV cache once per chunk (one full forward
plus 8 incremental latent-token decodes), routes it, and runs the Euler
integration without ever re-invoking the backbone.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # tiny matrices: multithreaded BLAS only adds overhead
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

from . import autodiff as ad
from . import backbone as B
from . import data as D
from . import env as E
from . import expert as X
from . import fast_tokenizer as ft
from . import lam as L
from . import nn
from .checkpoint import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 7
    sigma: float = 0.2
    use_fast: bool = True
    use_lam: bool = True
    lat_only_context: bool = False
    include_fast: bool = False
    paper_literal_sign: bool = False
    fast_gamma: float = 10.0
    fast_vocab_size: int = 256
    seed: int = 0

    def to_meta(self):
        return self.__dict__.copy()

    @staticmethod
    def from_meta(meta):
        return PipelineConfig(**meta)


_STAGES = ("lam", "pretrain", "finetune")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    steps: int
    batch: int = 8
    lr: float = 0.05
    gradient_boundary: str = ""
    mix_weights: tuple = (0.8, 0.2)  # (robot, qa), pretrain only
    m_samples: int = 1
    seed: int = 0
    allow_boundary_override: bool = False

    def __post_init__(self):
        if self.stage not in _STAGES:
            raise ValueError(f"stage must be one of {_STAGES}")
        required = {"pretrain": "truncate", "finetune": "flow_through"}.get(self.stage)
        boundary = self.gradient_boundary or required or "truncate"
        if required and boundary != required and not self.allow_boundary_override:
            raise ValueError(
                f"{self.stage} requires gradient_boundary={required!r}; "
                "pass allow_boundary_override=True to deviate"
            )
        object.__setattr__(self, "gradient_boundary", boundary)


def reference_stage_configs(seed=0):
    """Desk-scale budgets: cheap enough for a CPU, long enough to learn."""
    return {
        "lam": StageConfig(stage="lam", steps=2000, batch=8, lr=2e-3, seed=seed),
        "pretrain": StageConfig(stage="pretrain", steps=5000, batch=8, lr=3e-3, m_samples=1, seed=seed),
        "finetune": StageConfig(stage="finetune", steps=2000, batch=8, lr=1e-3, m_samples=4, seed=seed),
    }


@dataclass
class EvalReport:
    success_rate: float
    episodes: int
    step_counts: list
    losses_csv: str


@dataclass
class InferStats:
    backbone_full_calls: int
    lat_decode_calls: int
    backbone_calls_in_euler: int
    field_evals: int


class VLASystem:
    """Backbone + expert + tokenizer artifacts behind one policy interface."""

    def __init__(self, config: PipelineConfig, vocab=None, seed=None):
        seed = config.seed if seed is None else seed
        self.config = config
        self.vocab = vocab or B.build_vocab(n_fast=config.fast_vocab_size)
        self.backbone = B.Backbone(B.BackboneConfig(), self.vocab, seed=seed)
        self.expert = X.ActionExpert(
            X.ExpertConfig(k=config.k, sigma=config.sigma, m_samples=4), seed=seed + 1
        )
        self.normalizer = None
        self.fast_stats = None
        self.fast_vocab = None
        self.backbone_opt = nn.Adam()
        self.expert_opt = nn.Adam()

    def reset_optimizers(self):
        self.backbone_opt = nn.Adam()
        self.expert_opt = nn.Adam()

    # -- tokenizer fitting ----------------------------------------------------

    def fit_tokenizer(self, episodes):
        """Fit action percentiles, z-score stats, and the BPE vocabulary."""
        chunks = D.action_chunk_corpus(episodes, self.config.k)
        self.fast_stats, mean, std = D.compute_action_stats(episodes)
        self.normalizer = X.ActionNormalizer(mean=mean, std=std)
        seqs = [
            ft.flatten(ft.quantize(ft.dct2(self.fast_stats.normalize(c)), self.config.fast_gamma))
            for c in chunks
        ]
        self.fast_vocab = ft.bpe_train(seqs, self.config.fast_vocab_size)

    # -- sample construction ----------------------------------------------------

    def robot_sample(self, episode, t):
        chunk = episode.chunk_at(t, self.config.k)
        lat = None
        if self.config.use_lam:
            if episode.latent_labels is None:
                raise ValueError(f"{episode.episode_id} has no latent labels; run stage 1")
            lat = episode.latent_labels[t]
        fast = None
        if self.config.use_fast:
            fast = ft.encode_chunk(
                chunk, self.fast_stats, self.config.fast_gamma, self.fast_vocab
            ).ids
        return B.ActionSample(
            image=np.asarray(episode.frames[t], dtype=np.float64),
            instruction=episode.instruction,
            state=np.asarray(episode.states[t], dtype=np.float64),
            lat_targets=lat,
            fast_targets=fast,
            chunk=self.normalizer.normalize(chunk),
        )

    @staticmethod
    def qa_sample(qa: D.QASample):
        return B.QASample(
            image=np.asarray(qa.frame, dtype=np.float64),
            question=qa.question,
            answer=qa.answer,
        )

    # -- one optimization step ----------------------------------------------------

    def train_step(self, robot_samples, qa_samples, rng, lr, boundary, m=1):
        """Joint backward over token and flow losses; returns loss scalars."""
        g = ad.Graph()
        bb = self.backbone.params.leaves(g)
        xp = self.expert.params.leaves(g)
        zero = g.constant(np.float64(0.0))
        l_lat = l_fast = l_ans = l_flow = zero
        samples = list(robot_samples) + list(qa_samples)
        if samples:
            # robot and QA share one padded causal forward; per-sample span
            # losses keep the supervision separated
            assembled = [
                self.backbone.assemble(bb, s, self.config.use_lam, self.config.use_fast)
                if isinstance(s, B.ActionSample)
                else self.backbone.assemble(bb, s)
                for s in samples
            ]
            hidden, caches, _ = self.backbone.forward_hidden(bb, assembled)
            l_lat, l_fast, l_ans = self.backbone.hidden_span_losses(bb, hidden, assembled, samples)
        if robot_samples:
            ctx_layers, _ = B.route_kv_batch(
                caches,
                [lay for _, lay in assembled[: len(robot_samples)]],
                include_fast=self.config.include_fast,
                lat_only=self.config.lat_only_context,
                batch_rows=slice(0, len(robot_samples)),
            )
            chunks = np.stack([s.chunk for s in robot_samples])
            states = np.stack([s.state for s in robot_samples])
            l_flow, _ = self.expert.flow_loss(
                xp, chunks, states, ctx_layers, rng, m=m, boundary=boundary,
                paper_literal_sign=self.config.paper_literal_sign,
            )

        total = ad.add(ad.add(l_lat, l_fast), ad.add(l_ans, l_flow))
        if not np.isfinite(total.array):
            raise ad.GraphError("non-finite training loss")
        grads = ad.backward(g, total)
        if not robot_samples:
            touched = [n for n in xp.values() if n in grads and np.any(grads[n])]
            assert not touched, "QA-only step produced gradients on expert parameters"
        self.backbone_opt.step(self.backbone.params, bb, grads, lr)
        self.expert_opt.step(self.expert.params, xp, grads, lr)
        return {
            "loss_lat": float(l_lat.array),
            "loss_fast": float(l_fast.array),
            "loss_answer": float(l_ans.array),
            "loss_flow": float(l_flow.array),
        }

    # -- inference ----------------------------------------------------

    def infer_chunk(self, image, instruction, state, rng):
        """Denoise one action chunk; the backbone cache is computed once.

        Returns (denormalized (k, 20) chunk, InferStats).
        """
        if self.normalizer is None:
            raise ValueError("system has no fitted action normalizer")
        cfg = self.config
        sample = B.ActionSample(
            image=np.asarray(image, dtype=np.float64),
            instruction=instruction,
            state=np.asarray(state, dtype=np.float64),
        )
        logits, cache, _ = self.backbone.forward_single(sample)
        full_calls, lat_calls = 1, 0
        if cfg.use_lam:
            v = self.vocab
            row = logits[-1]
            for _ in range(8):
                code = int(np.argmax(row[v.latent_offset : v.latent_offset + v.n_latent]))
                row, cache = self.backbone.extend_cache(
                    cache, v.latent_offset + code, B.Role.LAT
                )
                lat_calls += 1
        ctx = B.route_kv(cache, include_fast=cfg.include_fast, lat_only=cfg.lat_only_context)
        euler_backbone_calls = 0
        field_evals = 0

        def field(a, tau):
            nonlocal field_evals
            field_evals += 1
            g = ad.Graph()
            xp = self.expert.params.leaves(g)
            ctx_nodes = tuple(
                (g.constant(k[None, :, :]), g.constant(v[None, :, :])) for k, v in ctx.layers
            )
            if ctx.length == 0:
                ctx_nodes = None
            vhat = self.expert.forward(
                xp, a[None, :, :], [tau], sample.state[None, :], ctx_nodes
            )
            return vhat.array[0]

        initial = rng.normal(size=(cfg.k, D.ACTION_DIMS))
        out = X.euler_integrate(initial, field, cfg.sigma)
        chunk = self.normalizer.denormalize(out)
        if not np.all(np.isfinite(chunk)):
            raise ad.GraphError("non-finite action chunk at inference")
        return chunk, InferStats(full_calls, lat_calls, euler_backbone_calls, field_evals)

    # -- persistence ----------------------------------------------------

    def save(self, path):
        params = {}
        for k, v in self.backbone.params.items():
            params[f"backbone/{k}"] = v
        for k, v in self.expert.params.items():
            params[f"expert/{k}"] = v
        if self.normalizer is not None:
            params["norm/mean"] = self.normalizer.mean
            params["norm/std"] = self.normalizer.std
        if self.fast_stats is not None:
            params["fast/low"] = self.fast_stats.low
            params["fast/high"] = self.fast_stats.high
        meta = {
            "config": self.config.to_meta(),
            "vocab": self.vocab.to_meta(),
            "fast_vocab": _vocab_to_meta(self.fast_vocab) if self.fast_vocab else None,
        }
        save_checkpoint(path, params, meta=meta)

    @staticmethod
    def load(path):
        params, meta = load_checkpoint(path, with_meta=True)
        config = PipelineConfig.from_meta(meta["config"])
        vocab = B.VocabMap.from_meta(meta["vocab"])
        system = VLASystem(config, vocab=vocab)
        for k in list(system.backbone.params):
            system.backbone.params[k] = params[f"backbone/{k}"]
        for k in list(system.expert.params):
            system.expert.params[k] = params[f"expert/{k}"]
        if "norm/mean" in params:
            system.normalizer = X.ActionNormalizer(params["norm/mean"], params["norm/std"])
        if "fast/low" in params:
            system.fast_stats = ft.NormStats(low=params["fast/low"], high=params["fast/high"])
        if meta.get("fast_vocab"):
            system.fast_vocab = _vocab_from_meta(meta["fast_vocab"])
        return system


def _vocab_to_meta(vocab):
    return {
        "base": [[k, v] for k, v in sorted(vocab.base_alphabet.items())],
        "oov": vocab.oov_id,
        "merges": [list(m) for m in vocab.merges],
        "vocab_size": vocab.vocab_size,
    }


def _vocab_from_meta(meta):
    return ft.FastVocab(
        base_alphabet={int(k): int(v) for k, v in meta["base"]},
        oov_id=meta["oov"],
        merges=tuple(tuple(m) for m in meta["merges"]),
        vocab_size=meta["vocab_size"],
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["step", "loss_lat", "loss_fast", "loss_answer", "loss_flow"])

    def write(self, step, losses):
        self._writer.writerow(
            [
                step,
                f"{losses.get('loss_lat', 0.0):.6f}",
                f"{losses.get('loss_fast', 0.0):.6f}",
                f"{losses.get('loss_answer', 0.0):.6f}",
                f"{losses.get('loss_flow', 0.0):.6f}",
            ]
        )

    def close(self):
        self._fh.close()


def run_stage1_lam(data_dir, stage: StageConfig, out_dir, lam_config=None):
    """Train the latent action model, then label every episode in place.

    Returns (model, checkpoint path, metrics csv path).
    """
    if stage.stage != "lam":
        raise ValueError("run_stage1_lam needs a lam StageConfig")
    os.makedirs(out_dir, exist_ok=True)
    episodes = D.load_dataset(data_dir)
    cfg = lam_config or L.LamConfig()
    model = L.LatentActionModel(cfg, seed=stage.seed)
    rng = np.random.default_rng(np.random.SeedSequence([stage.seed, 11]))
    gap = int(round(cfg.frame_gap_seconds * episodes[0].fps))
    usable = [ep for ep in episodes if len(ep) >= gap + 1]
    if not usable:
        raise ValueError("no episode long enough for the configured frame gap")

    optimizer = nn.Adam()
    csv_path = os.path.join(out_dir, "lam_metrics.csv")
    metrics_fh = open(csv_path, "w", newline="", encoding="utf-8")
    metrics = csv.writer(metrics_fh)
    metrics.writerow(["step", "loss"])
    ckpt_path = os.path.join(out_dir, "lam.ckpt")
    last_good = model.params.copy_arrays()
    try:
        with threadpool_limits(limits=1):
            for step in range(stage.steps):
                cur, fut = _sample_pairs(usable, gap, stage.batch, rng)
                lr = nn.cosine_lr(stage.lr, step, stage.steps)
                loss = model.train_step(cur, fut, rng, lr=lr, optimizer=optimizer)
                metrics.writerow([step, f"{loss:.6f}"])
                if (step + 1) % cfg.refresh_interval == 0:
                    model.codebook_refresh(rng)
                if (step + 1) % 100 == 0:
                    last_good = model.params.copy_arrays()
    except ad.GraphError as err:
        save_checkpoint(ckpt_path, last_good)
        metrics_fh.close()
        raise RuntimeError(
            f"stage 1 diverged ({err}); last good checkpoint at {ckpt_path}"
        ) from err
    metrics_fh.close()
    save_checkpoint(ckpt_path, model.params, meta={"lam": True})

    for ep_dir in sorted(os.listdir(data_dir)):
        full = os.path.join(data_dir, ep_dir)
        if not os.path.isdir(full):
            continue
        ep = D.load_episode(full)
        labels = model.label_episode(ep)
        D.save_latent_labels(os.path.join(full, "latent_labels.txt"), labels)
    return model, ckpt_path, csv_path


def _sample_pairs(episodes, gap, batch, rng):
    cur, fut = [], []
    for _ in range(batch):
        ep = episodes[int(rng.integers(len(episodes)))]
        t = int(rng.integers(len(ep) - gap))
        cur.append(np.asarray(ep.frames[t], dtype=np.float64))
        fut.append(np.asarray(ep.frames[t + gap], dtype=np.float64))
    return np.stack(cur), np.stack(fut)


def run_stage2_pretrain(system: VLASystem, data_dir, qa_dir, stage: StageConfig, out_dir):
    """Mixed robot/QA pretraining with the flow gradient boundary truncated."""
    if stage.stage != "pretrain":
        raise ValueError("run_stage2_pretrain needs a pretrain StageConfig")
    os.makedirs(out_dir, exist_ok=True)
    episodes = D.load_dataset(data_dir)
    qa = D.load_qa(qa_dir)
    if system.fast_vocab is None:
        system.fit_tokenizer(episodes)
    X.set_gradient_boundary(stage.gradient_boundary)
    system.reset_optimizers()

    robot_items = [(ei, t) for ei, ep in enumerate(episodes) for t in range(len(ep))]
    stream = D.mix_stream(
        [(robot_items, stage.mix_weights[0]), (list(range(len(qa))), stage.mix_weights[1])],
        seed=stage.seed,
    )
    rng = np.random.default_rng(np.random.SeedSequence([stage.seed, 22]))
    csv_path = os.path.join(out_dir, "pretrain_metrics.csv")
    metrics = MetricsWriter(csv_path)
    ckpt_path = os.path.join(out_dir, "pretrain.ckpt")
    try:
        with threadpool_limits(limits=1):
            for step in range(stage.steps):
                robot_batch, qa_batch = [], []
                for _ in range(stage.batch):
                    source, item = next(stream)
                    if source == 0:
                        ei, t = item
                        robot_batch.append(system.robot_sample(episodes[ei], t))
                    else:
                        qa_batch.append(system.qa_sample(qa[item]))
                lr = nn.cosine_lr(stage.lr, step, stage.steps)
                losses = system.train_step(
                    robot_batch, qa_batch, rng, lr,
                    boundary=stage.gradient_boundary, m=stage.m_samples,
                )
                metrics.write(step, losses)
    except ad.GraphError as err:
        metrics.close()
        raise RuntimeError(f"stage 2 diverged: {err}") from err
    metrics.close()
    system.save(ckpt_path)
    return ckpt_path, csv_path


def run_stage3_finetune(system: VLASystem, data_dir, stage: StageConfig, out_dir):
    """Robot-only fine-tuning; flow gradients reach the backbone."""
    if stage.stage != "finetune":
        raise ValueError("run_stage3_finetune needs a finetune StageConfig")
    os.makedirs(out_dir, exist_ok=True)
    episodes = D.load_dataset(data_dir)
    if system.fast_vocab is None:
        system.fit_tokenizer(episodes)
    X.set_gradient_boundary(stage.gradient_boundary)
    system.reset_optimizers()
    robot_items = [(ei, t) for ei, ep in enumerate(episodes) for t in range(len(ep))]
    stream = D.mix_stream([(robot_items, 1.0)], seed=stage.seed)
    rng = np.random.default_rng(np.random.SeedSequence([stage.seed, 33]))
    csv_path = os.path.join(out_dir, "finetune_metrics.csv")
    metrics = MetricsWriter(csv_path)
    ckpt_path = os.path.join(out_dir, "finetune.ckpt")
    try:
        with threadpool_limits(limits=1):
            for step in range(stage.steps):
                batch = []
                for _ in range(stage.batch):
                    _, (ei, t) = next(stream)
                    batch.append(system.robot_sample(episodes[ei], t))
                lr = nn.cosine_lr(stage.lr, step, stage.steps)
                losses = system.train_step(
                    batch, [], rng, lr, boundary=stage.gradient_boundary, m=stage.m_samples
                )
                metrics.write(step, losses)
    except ad.GraphError as err:
        metrics.close()
        raise RuntimeError(f"stage 3 diverged: {err}") from err
    metrics.close()
    system.save(ckpt_path)
    return ckpt_path, csv_path


# ---------------------------------------------------------------------------
# policies and evaluation
# ---------------------------------------------------------------------------


class VLAPolicy:
    """Closed-loop policy adapter around VLASystem.infer_chunk."""

    def __init__(self, system: VLASystem, seed=0):
        self.system = system
        self.rng = np.random.default_rng(seed)
        self.last_stats = None

    def __call__(self, image, instruction, state, arm, world=None):
        chunk, stats = self.system.infer_chunk(image, instruction, state, self.rng)
        self.last_stats = stats
        return chunk


class ScriptedPolicy:
    """Oracle upper bound: simulates the scripted controller k steps ahead."""

    def __init__(self, k=7):
        self.k = k

    def __call__(self, image, instruction, state, arm, world=None):
        if world is None:
            raise ValueError("the scripted policy needs world access")
        sim, goal = world
        rows = []
        for _ in range(self.k):
            action = E.scripted_expert(sim, goal)
            rows.append(D.pad_to_20(action, arm))
            sim = E.env_step(sim, action)
        return np.asarray(rows)


class RandomPolicy:
    """Chance floor: uniform random deltas and grip commands."""

    def __init__(self, k=7, seed=0):
        self.k = k
        self.rng = np.random.default_rng(seed)

    def __call__(self, image, instruction, state, arm, world=None):
        rows = []
        for _ in range(self.k):
            native = np.array(
                [
                    self.rng.uniform(-E.MAX_STEP, E.MAX_STEP),
                    self.rng.uniform(-E.MAX_STEP, E.MAX_STEP),
                    self.rng.uniform(0.0, 1.0),
                    0.0,
                ]
            )
            rows.append(D.pad_to_20(native, arm))
        return np.asarray(rows)


def evaluate(policy, n_episodes, seed, k=7, max_steps=150,
             scene_config=E.SceneConfig(), losses_csv="", report_path=None):
    """Closed-loop success rate over fresh scenes.

    Chunks execute open loop: all k actions run before the policy is
    queried again. Success is the target object inside the target
    container within max_steps environment steps.
    """
    step_counts = []
    successes = 0
    with threadpool_limits(limits=1):
        for i in range(n_episodes):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 100_000 + i]))
            world = E.sample_scene(rng, scene_config)
            obj_idx = int(rng.integers(len(world.objects)))
            cont_idx = int(rng.integers(len(world.containers)))
            arm = "left" if rng.integers(2) == 0 else "right"
            obj = world.objects[obj_idx]
            cont = world.containers[cont_idx]
            instruction = f"put the {obj.color} {obj.shape} into the {cont.name}"
            steps = 0
            done = False
            while steps < max_steps and not done:
                image = E.render(world)
                state = D.pad_to_20(E.native_state(world), arm)
                chunk = policy(image, instruction, state, arm, world=(world, (obj_idx, cont_idx)))
                for row in np.asarray(chunk)[: max_steps - steps]:
                    world = E.env_step(world, D.unpad(row, arm))
                    steps += 1
                    if E.task_success(world, obj_idx, cont_idx):
                        done = True
                        break
            successes += done
            step_counts.append(steps)
    report = EvalReport(
        success_rate=successes / n_episodes,
        episodes=n_episodes,
        step_counts=step_counts,
        losses_csv=losses_csv,
    )
    if report_path:
        save_eval_report(report_path, report)
    return report


def save_eval_report(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"success_rate {report.success_rate:.4f}\n")
        fh.write(f"episodes {report.episodes}\n")
        fh.write(f"losses_csv {report.losses_csv or '-'}\n")
        fh.write("steps " + " ".join(str(s) for s in report.step_counts) + "\n")


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    pipeline = PipelineConfig.from_meta(raw.get("pipeline", {}))
    stages = {}
    for name, cfg in raw.get("stages", {}).items():
        stages[name] = StageConfig(stage=name, **cfg)
    defaults = reference_stage_configs(pipeline.seed)
    for name, cfg in defaults.items():
        stages.setdefault(name, cfg)
    return pipeline, stages
