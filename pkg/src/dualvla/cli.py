"""Command-line surface: dataset tooling, tokenizer tooling, and the
training/eval pipeline.

    dualvla data gen --episodes 500 --seed 0 --out data/
    dualvla data qa --n 300 --seed 0 --out qa/
    dualvla data stats data/
    dualvla fast fit --data data/ --vocab-file vocab.txt --stats-file stats.txt
    dualvla fast encode --data data/ --vocab-file vocab.txt --stats-file stats.txt --episode 0 --step 0
    dualvla fast decode --vocab-file vocab.txt --stats-file stats.txt --k 7 --ids "3 17 4"
    dualvla gen-data / train-lam / label / pretrain / finetune / infer / eval / ablate
"""

import json
import os

import click
import numpy as np

from . import data as D
from . import env as E
from . import fast_tokenizer as ft
from . import lam as L
from . import pipeline as P
from .checkpoint import load_checkpoint


@click.group()
def main():
    """Dual-level action-representation VLA at desk scale."""


# ---------------------------------------------------------------------------
# data group
# ---------------------------------------------------------------------------


@main.group()
def data():
    """Dataset generation and inspection."""


@data.command("gen")
@click.option("--episodes", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True)
@click.option("--objects", type=int, default=2, help="objects per scene")
@click.option("--containers", type=int, default=1, help="containers per scene")
def data_gen(episodes, seed, out_dir, objects, containers):
    cfg = E.SceneConfig(n_objects=objects, n_containers=containers)
    D.generate_dataset(out_dir, episodes, seed, scene_config=cfg)
    click.echo(f"wrote {episodes} episodes to {out_dir}")


@data.command("qa")
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True)
def data_qa(n, seed, out_dir):
    D.save_qa(out_dir, D.generate_qa(n, seed))
    click.echo(f"wrote {n} QA samples to {out_dir}")


@data.command("stats")
@click.argument("data_dir")
def data_stats(data_dir):
    """Print per-dimension action percentiles and z-score statistics."""
    episodes = D.load_dataset(data_dir)
    stats, mean, std = D.compute_action_stats(episodes)
    click.echo("dim  p01         p99         mean        std")
    for i in range(stats.low.size):
        click.echo(
            f"{i:>3}  {stats.low[i]:<11.6f} {stats.high[i]:<11.6f} "
            f"{mean[i]:<11.6f} {std[i]:<11.6f}"
        )


# ---------------------------------------------------------------------------
# fast tokenizer group
# ---------------------------------------------------------------------------


@main.group()
def fast():
    """Discrete action-chunk tokenizer."""


@fast.command("fit")
@click.option("--data", "data_dir", required=True)
@click.option("--vocab-file", required=True)
@click.option("--stats-file", required=True)
@click.option("--gamma", type=float, default=ft.DEFAULT_GAMMA)
@click.option("--vocab-size", type=int, default=ft.DEFAULT_VOCAB_SIZE)
@click.option("--k", type=int, default=7)
def fast_fit(data_dir, vocab_file, stats_file, gamma, vocab_size, k):
    episodes = D.load_dataset(data_dir)
    chunks = D.action_chunk_corpus(episodes, k)
    stats, mean, std = D.compute_action_stats(episodes)
    seqs = [ft.flatten(ft.quantize(ft.dct2(stats.normalize(c)), gamma)) for c in chunks]
    vocab = ft.bpe_train(seqs, vocab_size)
    ft.save_vocab(vocab_file, vocab, gamma)
    ft.save_action_stats(stats_file, stats, mean, std)
    lens = [len(ft.bpe_encode(vocab, s)) for s in seqs[:200]]
    click.echo(
        f"fitted vocab size {vocab.size} ({len(vocab.merges)} merges); "
        f"mean tokens/chunk {np.mean(lens):.1f}"
    )


@fast.command("encode")
@click.option("--data", "data_dir", required=True)
@click.option("--vocab-file", required=True)
@click.option("--stats-file", required=True)
@click.option("--episode", type=int, default=0)
@click.option("--step", type=int, default=0)
@click.option("--k", type=int, default=7)
def fast_encode(data_dir, vocab_file, stats_file, episode, step, k):
    vocab, gamma = ft.load_vocab(vocab_file)
    stats, _, _ = ft.load_action_stats(stats_file)
    episodes = D.load_dataset(data_dir)
    chunk = episodes[episode].chunk_at(step, k)
    tokens = ft.encode_chunk(chunk, stats, gamma, vocab)
    click.echo(" ".join(str(i) for i in tokens.ids))


@fast.command("decode")
@click.option("--vocab-file", required=True)
@click.option("--stats-file", required=True)
@click.option("--k", type=int, default=7)
@click.option("--ids", required=True, help="space-separated token ids")
def fast_decode(vocab_file, stats_file, k, ids):
    vocab, gamma = ft.load_vocab(vocab_file)
    stats, _, _ = ft.load_action_stats(stats_file)
    token_ids = [int(v) for v in ids.split()]
    chunk = ft.decode_chunk(token_ids, stats, gamma, vocab, k)
    for row in chunk:
        click.echo(" ".join(f"{v:.5f}" for v in row))


# ---------------------------------------------------------------------------
# pipeline commands
# ---------------------------------------------------------------------------


def _stage_from_config(config_path, name, seed):
    if config_path:
        pipeline_cfg, stages = P.load_run_config(config_path)
        return pipeline_cfg, stages[name]
    return P.PipelineConfig(seed=seed), P.reference_stage_configs(seed)[name]


@main.command("gen-data")
@click.option("--episodes", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True)
@click.option("--qa", "qa_n", type=int, default=0, help="also write N QA samples to OUT_qa")
def gen_data(episodes, seed, out_dir, qa_n):
    D.generate_dataset(out_dir, episodes, seed)
    click.echo(f"wrote {episodes} episodes to {out_dir}")
    if qa_n:
        qa_dir = out_dir.rstrip("/") + "_qa"
        D.save_qa(qa_dir, D.generate_qa(qa_n, seed))
        click.echo(f"wrote {qa_n} QA samples to {qa_dir}")


@main.command("fit-fast")
@click.option("--data", "data_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--gamma", type=float, default=ft.DEFAULT_GAMMA)
@click.option("--vocab-size", type=int, default=ft.DEFAULT_VOCAB_SIZE)
@click.pass_context
def fit_fast(ctx, data_dir, out_dir, gamma, vocab_size):
    os.makedirs(out_dir, exist_ok=True)
    ctx.invoke(
        fast_fit,
        data_dir=data_dir,
        vocab_file=os.path.join(out_dir, "fast_vocab.txt"),
        stats_file=os.path.join(out_dir, "action_stats.txt"),
        gamma=gamma,
        vocab_size=vocab_size,
        k=7,
    )


@main.command("train-lam")
@click.option("--data", "data_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0)
def train_lam(data_dir, out_dir, config_path, seed):
    _, stage = _stage_from_config(config_path, "lam", seed)
    _, ckpt, csv_path = P.run_stage1_lam(data_dir, stage, out_dir)
    click.echo(f"checkpoint {ckpt}; metrics {csv_path}; episodes labeled in place")


@main.command("label")
@click.option("--data", "data_dir", required=True)
@click.option("--ckpt", "ckpt_path", required=True)
def label(data_dir, ckpt_path):
    model = L.LatentActionModel(L.LamConfig(), seed=0)
    params = load_checkpoint(ckpt_path)
    for name in list(model.params):
        model.params[name] = params[name]
    count = 0
    for ep_dir in sorted(os.listdir(data_dir)):
        full = os.path.join(data_dir, ep_dir)
        if not os.path.isdir(full):
            continue
        ep = D.load_episode(full)
        D.save_latent_labels(
            os.path.join(full, "latent_labels.txt"), model.label_episode(ep)
        )
        count += 1
    click.echo(f"labeled {count} episodes")


@main.command("pretrain")
@click.option("--data", "data_dir", required=True)
@click.option("--qa", "qa_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0)
@click.option("--no-fast", is_flag=True, help="ablation: drop discrete action tokens")
@click.option("--no-lam", is_flag=True, help="ablation: drop latent action tokens")
def pretrain(data_dir, qa_dir, out_dir, config_path, seed, no_fast, no_lam):
    pipeline_cfg, stage = _stage_from_config(config_path, "pretrain", seed)
    if no_fast or no_lam:
        pipeline_cfg = P.PipelineConfig(
            **{**pipeline_cfg.to_meta(), "use_fast": not no_fast, "use_lam": not no_lam}
        )
    system = P.VLASystem(pipeline_cfg)
    ckpt, csv_path = P.run_stage2_pretrain(system, data_dir, qa_dir, stage, out_dir)
    click.echo(f"checkpoint {ckpt}; metrics {csv_path}")


@main.command("finetune")
@click.option("--data", "data_dir", required=True)
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0)
def finetune(data_dir, ckpt_path, out_dir, config_path, seed):
    _, stage = _stage_from_config(config_path, "finetune", seed)
    system = P.VLASystem.load(ckpt_path)
    ckpt, csv_path = P.run_stage3_finetune(system, data_dir, stage, out_dir)
    click.echo(f"checkpoint {ckpt}; metrics {csv_path}")


@main.command("infer")
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--episode", type=int, default=0)
@click.option("--step", type=int, default=0)
@click.option("--seed", type=int, default=0)
def infer(ckpt_path, data_dir, episode, step, seed):
    system = P.VLASystem.load(ckpt_path)
    ep = D.load_dataset(data_dir)[episode]
    rng = np.random.default_rng(seed)
    chunk, stats = system.infer_chunk(ep.frames[step], ep.instruction, ep.states[step], rng)
    click.echo(
        f"# backbone calls: {stats.backbone_full_calls} full, "
        f"{stats.lat_decode_calls} incremental, {stats.backbone_calls_in_euler} in euler; "
        f"{stats.field_evals} field evals"
    )
    for row in chunk:
        click.echo(" ".join(f"{v:.5f}" for v in row))


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True)
@click.option("--episodes", type=int, default=50)
@click.option("--seed", type=int, default=0)
@click.option("--report", "report_path", default=None)
def eval_cmd(ckpt_path, episodes, seed, report_path):
    system = P.VLASystem.load(ckpt_path)
    report = P.evaluate(
        P.VLAPolicy(system, seed=seed), episodes, seed=seed, k=system.config.k,
        report_path=report_path,
    )
    click.echo(f"success_rate {report.success_rate:.3f} over {report.episodes} episodes")


@main.command("ablate")
@click.option("--data", "data_dir", required=True)
@click.option("--qa", "qa_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--seed", type=int, default=0)
@click.option("--no-fast", is_flag=True)
@click.option("--no-lam", is_flag=True)
@click.option("--eval-episodes", type=int, default=50)
def ablate(data_dir, qa_dir, out_dir, config_path, seed, no_fast, no_lam, eval_episodes):
    """Pretrain + finetune + evaluate one ablation setting."""
    pipeline_cfg, pre = _stage_from_config(config_path, "pretrain", seed)
    _, fin = _stage_from_config(config_path, "finetune", seed)
    pipeline_cfg = P.PipelineConfig(
        **{**pipeline_cfg.to_meta(), "use_fast": not no_fast, "use_lam": not no_lam}
    )
    system = P.VLASystem(pipeline_cfg)
    P.run_stage2_pretrain(system, data_dir, qa_dir, pre, out_dir)
    P.run_stage3_finetune(system, data_dir, fin, out_dir)
    report = P.evaluate(
        P.VLAPolicy(system, seed=seed), eval_episodes, seed=1000 + seed,
        report_path=os.path.join(out_dir, "eval_report.txt"),
    )
    click.echo(
        json.dumps(
            {"use_fast": not no_fast, "use_lam": not no_lam, "success_rate": report.success_rate}
        )
    )


if __name__ == "__main__":
    main()
