"""``splatstream`` command line.

Every option can also come from a key-value config file given with
``--config``: ``key = value`` lines before any section apply to all
subcommands, lines under ``[replay]`` (etc.) only to that one. Flags on the
command line win.
"""

from __future__ import annotations

import configparser
import sys
from pathlib import Path

import click
import numpy as np

from ..codec import Codebook, sh_vectors, train_codebook
from ..core import RenderConfig, StereoRig
from ..scene import (
    SceneSpec, build_lod_tree, generate_synthetic_scene, load_ply, load_tree, partition_subtrees, save_ply,
    save_tree,
)
from ..stream import ClientSession, CloudSession, MessageType, bandwidth_report, connect, serve_once
from ..render import write_image
from .replay import ReplayOptions, bench, render_pair, replay
from .trajectory import Trajectory, orbit


def read_config(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = lambda k: k.strip().replace("-", "_")
    parser.read_string("[__global__]\n" + Path(path).read_text())
    shared = dict(parser["__global__"])
    out = {}
    for name in COMMANDS:
        section = dict(shared)
        if parser.has_section(name):
            section.update({k: v for k, v in parser[name].items() if k not in parser.defaults()})
        out[name] = section
    return out


def _config_callback(ctx, _param, value):
    if value:
        ctx.default_map = read_config(value)
    return value


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), is_eager=True, expose_value=False,
              callback=_config_callback, help="Key-value file supplying option defaults.")
def main():
    """Scene preparation, LoD streaming co-simulation and stereo rendering."""


def camera_options(fn):
    opts = [
        click.option("--width", type=int, default=256, show_default=True),
        click.option("--height", type=int, default=192, show_default=True),
        click.option("--focal", type=float, default=250.0, show_default=True),
        click.option("--near", type=float, default=1.0, show_default=True),
        click.option("--far", type=float, default=1000.0, show_default=True),
        click.option("--tile-size", type=int, default=4, show_default=True),
        click.option("--tau-star", type=float, default=2.0, show_default=True, help="LoD pixel threshold."),
        click.option("--baseline", type=float, default=0.06, show_default=True, help="Stereo baseline (m)."),
    ]
    for o in reversed(opts):
        fn = o(fn)
    return fn


def _intrinsics(kw) -> dict:
    w, h = kw.pop("width"), kw.pop("height")
    return dict(focal=kw.pop("focal"), principal=(w / 2, h / 2), width=w, height=h, near=kw.pop("near"),
                far=kw.pop("far"), tile_size=kw["tile_size"])


def _render_config(kw) -> RenderConfig:
    t = kw.pop("tile_size")
    return RenderConfig(tile_size=t, tau_star=kw.pop("tau_star"), max_disparity_px=4 * t)


def _write_text(out, text: str) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_gaussians(path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    return load_tree(path).gaussians


@main.command("gen-scene")
@click.option("--cells-x", type=int, default=10, show_default=True)
@click.option("--cells-y", type=int, default=10, show_default=True)
@click.option("--per-cell", type=int, default=50, show_default=True)
@click.option("--cell-size", type=float, default=10.0, show_default=True)
@click.option("--max-height", type=float, default=18.0, show_default=True)
@click.option("--sh-degree", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output .ply path.")
def gen_scene(cells_x, cells_y, per_cell, cell_size, max_height, sh_degree, seed, out):
    """Write a synthetic city-block scene as a 3DGS PLY file."""
    gs = generate_synthetic_scene(SceneSpec(cells_x, cells_y, per_cell, cell_size, max_height, sh_degree, seed))
    save_ply(out, gs)
    click.echo(f"wrote {len(gs)} Gaussians to {out}")


@main.command("build-tree")
@click.option("--scene", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--branching", type=int, default=4, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output NLOD path.")
def build_tree_cmd(scene, branching, out):
    """Build a level-order LoD tree from a PLY scene."""
    tree = build_lod_tree(load_ply(scene), branching)
    save_tree(out, tree)
    click.echo(f"wrote tree: {len(tree)} nodes, depth {tree.depth}, to {out}")


@main.command("partition")
@click.option("--tree", "tree_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target", type=int, default=64, show_default=True, help="Target subtree size.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def partition_cmd(tree_path, target, out):
    """Split a tree into subtrees for temporal search."""
    tree = load_tree(tree_path)
    part = partition_subtrees(tree, target)
    save_tree(out, tree.with_partition(part))
    sizes = part.sizes
    click.echo(f"{part.subtree_count} subtrees, sizes {int(sizes.min())}..{int(sizes.max())}, wrote {out}")


@main.command("train-codebook")
@click.option("--source", type=click.Path(exists=True, dir_okay=False), required=True,
              help="A .ply scene or an NLOD tree.")
@click.option("--k", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-iter", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output NCBK path.")
def train_codebook_cmd(source, k, seed, max_iter, out):
    """Train the SH vector-quantization codebook."""
    book = train_codebook(sh_vectors(_load_gaussians(source)), k, seed=seed, max_iter=max_iter)
    book.save(out)
    click.echo(f"codebook K={book.size} dim={book.dim} version={book.version:#010x} -> {out}")


@main.command("gen-trajectory")
@click.option("--center", nargs=3, type=float, default=(50.0, 50.0, 0.0), show_default=True)
@click.option("--radius", type=float, default=40.0, show_default=True)
@click.option("--height", "elevation", type=float, default=8.0, show_default=True)
@click.option("--frames", type=int, default=200, show_default=True)
@click.option("--deg-per-frame", type=float, default=0.25, show_default=True)
@click.option("--fps", type=float, default=90.0, show_default=True)
@click.option("--out", default="-", show_default=True)
def gen_trajectory(center, radius, elevation, frames, deg_per_frame, fps, out):
    """Write a smooth orbit trajectory (frame,px,py,pz,qw,qx,qy,qz,t)."""
    _write_text(out, orbit(center, radius, elevation, frames, deg_per_frame, fps).to_text())


@main.command("replay")
@click.option("--tree", "tree_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trajectory", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--codebook", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--frame-interval", type=int, default=4, show_default=True)
@click.option("--reuse-threshold", type=int, default=32, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--full-search/--temporal-search", default=False, show_default=True)
@click.option("--check-oracle/--no-check-oracle", default=False, show_default=True)
@click.option("--psnr/--no-psnr", default=True, show_default=True)
@click.option("--images", type=click.Path(file_okay=False), default=None)
@click.option("--image-every", type=int, default=0, show_default=True)
@click.option("--image-format", type=click.Choice(["png", "ppm"]), default="png", show_default=True)
@click.option("--timings/--no-timings", default=False, show_default=True)
@click.option("--bandwidth-csv", type=click.Path(dir_okay=False), default=None)
@click.option("--out", default="-", show_default=True, help="Metrics CSV path, '-' for stdout.")
@camera_options
def replay_cmd(tree_path, trajectory, codebook, frame_interval, reuse_threshold, workers, full_search,
               check_oracle, psnr, images, image_every, image_format, timings, bandwidth_csv, out, **kw):
    """Co-simulate cloud search, streaming and client stereo rendering."""
    baseline = kw.pop("baseline")
    intr = _intrinsics(kw)
    config = _render_config(kw)
    opts = ReplayOptions(frame_interval, reuse_threshold, baseline, worker_count=workers,
                         temporal=not full_search, check_oracle=check_oracle, psnr=psnr, image_dir=images,
                         image_every=image_every, image_format=image_format, timings=timings)
    book = Codebook.load(codebook) if codebook else None
    res = replay(load_tree(tree_path), Trajectory.load(trajectory), book, intr, config, opts)
    _write_text(out, res.to_csv(timings))
    if bandwidth_csv:
        rounds = [r.delta_bytes for r in res.rows if r.round >= 0]
        Path(bandwidth_csv).write_text(bandwidth_report(rounds, frame_interval).to_csv())


@main.command("bench")
@click.option("--tree", "tree_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trajectory", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--csv/--table", "as_csv", default=False, show_default=True)
@camera_options
def bench_cmd(tree_path, trajectory, workers, as_csv, **kw):
    """Per-stage wall time with work counters."""
    baseline = kw.pop("baseline")
    intr = _intrinsics(kw)
    config = _render_config(kw)
    report = bench(load_tree(tree_path), Trajectory.load(trajectory), intr, config, baseline, workers)
    click.echo(report.to_csv() if as_csv else report.format())


@main.command("serve")
@click.option("--tree", "tree_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--codebook", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=7878, show_default=True)
@click.option("--frame-interval", type=int, default=4, show_default=True)
@click.option("--reuse-threshold", type=int, default=32, show_default=True)
@camera_options
def serve_cmd(tree_path, codebook, host, port, frame_interval, reuse_threshold, **kw):
    """Serve one client over TCP until it disconnects."""
    kw.pop("baseline")
    intr = _intrinsics(kw)
    config = _render_config(kw)
    cloud = CloudSession(load_tree(tree_path), Codebook.load(codebook), intr, config, frame_interval,
                         reuse_threshold)
    rounds = serve_once(cloud, host, port, ready=lambda p: click.echo(f"listening on {host}:{p}", err=True))
    click.echo(f"served {rounds} rounds", err=True)


@main.command("client")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=7878, show_default=True)
@click.option("--trajectory", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--frame-interval", type=int, default=4, show_default=True)
@click.option("--images", type=click.Path(file_okay=False), default=None)
@click.option("--out", default="-", show_default=True)
@camera_options
def client_cmd(host, port, trajectory, frame_interval, images, out, **kw):
    """Stream from a running ``serve`` and render each frame in stereo."""
    baseline = kw.pop("baseline")
    intr = _intrinsics(kw)
    config = _render_config(kw)
    text = run_client(connect(host, port), Trajectory.load(trajectory), intr, config, frame_interval,
                      baseline, images)
    _write_text(out, text)


def run_client(transport, trajectory, intrinsics, config, frame_interval=4, baseline=0.06, images=None) -> str:
    """Drive a connected transport; returns a CSV of per-round traffic."""
    client = ClientSession(intrinsics, config)
    transport.send(client.hello())
    while client.subgraph is None:
        msg = transport.recv()
        if msg is None:
            raise click.ClickException("server closed during handshake")
        client.handle(msg)
    lines = ["frame,round,delta_bytes,resident,queue"]
    out_dir = Path(images) if images else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    try:
        for i, pose in enumerate(trajectory):
            camera = pose.camera(**intrinsics)
            if i % frame_interval == 0:
                transport.send(client.pose(camera, pose.frame))
                msg = transport.recv()
                if msg is None or msg.type != MessageType.DELTA_CUT:
                    raise click.ClickException("expected DELTA_CUT from server")
                for reply in client.handle(msg):
                    transport.send(reply)
                nbytes = msg.frame_size
                round_id = client.rounds - 1
            else:
                nbytes, round_id = 0, -1
            queue = client.select(camera)
            if out_dir:
                gs = client.subgraph.gaussians
                res = render_pair(gs.take(np.searchsorted(gs.ids, queue)), StereoRig(camera, baseline), config)
                write_image(out_dir / f"frame{pose.frame:05d}_L.png", res.left.to_u8())
                write_image(out_dir / f"frame{pose.frame:05d}_R.png", res.right.to_u8())
            lines.append(f"{pose.frame},{round_id},{nbytes},{len(client.subgraph)},{len(queue)}")
    finally:
        transport.close()
    return "\n".join(lines) + "\n"


COMMANDS = ("gen-scene", "build-tree", "partition", "train-codebook", "gen-trajectory", "replay", "bench",
            "serve", "client")


if __name__ == "__main__":
    main()
