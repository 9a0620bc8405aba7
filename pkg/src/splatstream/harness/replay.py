"""Trajectory replay of the full cloud + client loop, and the stage benchmark."""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..codec import Codebook, sh_vectors, train_codebook
from ..core import GaussianSet, RenderConfig, StereoRig
from ..exceptions import ContractViolation
from ..render import depth_sort, preprocess, rasterize_mono, rasterize_stereo, write_image
from ..search import full_cut_search, overlap_ratio, temporal_cut_search, validate_cut
from ..stream import ChannelModel, ClientSession, CloudSession, SimulatedLink, bandwidth_report
from .metrics import MetricsRow, metrics_csv, psnr
from .trajectory import Trajectory

DEFAULT_INTRINSICS = dict(focal=250.0, principal=(128.0, 96.0), width=256, height=192, near=1.0, far=1000.0)


@dataclass
class ReplayOptions:
    frame_interval: int = 4
    reuse_threshold: int = 32
    baseline: float = 0.06
    target_fps: float = 90.0
    worker_count: int = 1
    temporal: bool = True
    check_oracle: bool = False
    psnr: bool = True
    image_dir: str | None = None
    image_every: int = 0
    image_format: str = "png"
    timings: bool = False


@dataclass
class ReplayResult:
    rows: list[MetricsRow]
    cloud: CloudSession
    client: ClientSession
    link: SimulatedLink
    images: list[Path] = field(default_factory=list)
    oracle_rounds: int = 0
    resident_sizes: list[int] = field(default_factory=list)

    def to_csv(self, timings: bool = False) -> str:
        return metrics_csv(self.rows, timings)


def _subset(gs: GaussianSet, ids: np.ndarray) -> GaussianSet:
    return gs.take(np.searchsorted(gs.ids, ids))


def render_pair(gaussians: GaussianSet, rig: StereoRig, config: RenderConfig):
    proj = depth_sort(preprocess(gaussians, rig, config))
    return rasterize_stereo(proj, rig, config)


def replay(tree, trajectory: Trajectory, codebook: Codebook | None = None, intrinsics: dict | None = None,
           config: RenderConfig | None = None, options: ReplayOptions | None = None,
           channel: ChannelModel | None = None) -> ReplayResult:
    """Run the co-simulation over ``trajectory``.

    A LoD round (pose up, DELTA_CUT down, ACK up) happens on every
    ``frame_interval``-th frame; every frame renders the client's local queue
    in stereo. With ``check_oracle`` each temporal cut is compared with a
    fresh full search and validated.
    """
    opts = options or ReplayOptions()
    config = config or RenderConfig()
    intrinsics = dict(intrinsics or DEFAULT_INTRINSICS)
    intrinsics.setdefault("tile_size", config.tile_size)
    if codebook is None:
        codebook = train_codebook(sh_vectors(tree.gaussians), min(256, len(tree)), seed=0)
    cloud = CloudSession(tree, codebook, intrinsics, config, opts.frame_interval, opts.reuse_threshold,
                         opts.worker_count, temporal=opts.temporal)
    client = ClientSession(intrinsics, config)
    link = SimulatedLink(downlink=channel or ChannelModel())
    link.client.send(client.hello())
    for m in cloud.handle(link.cloud.recv()):
        link.cloud.send(m)
    while link.client.pending():
        client.handle(link.client.recv())

    result = ReplayResult([], cloud, client, link)
    prev_cut = None
    out_dir = Path(opts.image_dir) if opts.image_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for i, pose in enumerate(trajectory):
        try:
            camera = pose.camera(**intrinsics)
            rig = StereoRig(camera, opts.baseline)
            round_id, delta_size, delta_bytes, energy, rate, visited = -1, 0, 0, 0.0, 0.0, 0
            t_search = t_stream = 0.0
            overlap = 1.0
            if i % opts.frame_interval == 0:
                t0 = time.perf_counter()
                link.client.send(client.pose(camera, pose.frame))
                (reply,) = cloud.handle(link.cloud.recv())
                log = cloud.log[-1]
                t1 = time.perf_counter()
                delivery = link.cloud.send(reply)
                for m in client.handle(link.client.recv()):
                    link.client.send(m)
                cloud.handle(link.cloud.recv())
                t_stream = time.perf_counter() - t1
                t_search = t1 - t0
                if opts.check_oracle:
                    full, _ = full_cut_search(cloud.tree, log.cut.pose, config)
                    if not (full.same_members(log.cut) and validate_cut(cloud.tree, log.cut)):
                        raise ContractViolation("cut differs from the full-search oracle")
                    result.oracle_rounds += 1
                if not np.array_equal(cloud.table.keys, client.subgraph.stored_ids):
                    raise ContractViolation("client resident set differs from the cloud table")
                round_id = log.round_id
                delta_size = len(log.delta)
                delta_bytes = delivery.bytes
                energy = delivery.energy
                rate = float(bandwidth_report([delivery.bytes], opts.frame_interval, opts.target_fps).rates_bps[0])
                visited = log.stats.nodes_visited
                if prev_cut is not None:
                    overlap = overlap_ratio(prev_cut, log.cut)
                prev_cut = log.cut
                result.resident_sizes.append(len(client.subgraph))

            t2 = time.perf_counter()
            queue = client.select(camera)
            decoded = _subset(client.subgraph.gaussians, queue)
            stereo = render_pair(decoded, rig, config)
            t_render = time.perf_counter() - t2
            quality = float("nan")
            if opts.psnr:
                lossless = render_pair(tree.gaussians.take(queue), rig, config)
                quality = psnr(stereo.left.color, lossless.left.color)
            if out_dir is not None and opts.image_every and i % opts.image_every == 0:
                for eye, fb in (("L", stereo.left), ("R", stereo.right)):
                    path = out_dir / f"frame{pose.frame:05d}_{eye}.{opts.image_format}"
                    result.images.append(write_image(path, fb.to_u8()))
            result.rows.append(MetricsRow(
                pose.frame, round_id, len(prev_cut) if prev_cut is not None else 0, len(queue), delta_size,
                delta_bytes, overlap, rate, energy, quality, visited, stereo.stats.stereo_alpha_evals,
                t_search, t_stream, t_render,
            ))
        except ContractViolation as exc:
            raise ContractViolation(f"frame {pose.frame}: {exc}") from exc
    return result


# ---------------------------------------------------------------------------
# Bench


@dataclass
class BenchRow:
    stage: str
    calls: int = 0
    wall_s: float = 0.0
    counter: str = ""
    count: int = 0


@dataclass
class BenchReport:
    rows: list[BenchRow]
    optimized: bool

    def row(self, stage: str) -> BenchRow:
        return next(r for r in self.rows if r.stage == stage)

    def ratio(self, num: str, den: str, attr: str = "count") -> float:
        d = getattr(self.row(den), attr)
        return getattr(self.row(num), attr) / d if d else 0.0

    def format(self) -> str:
        lines = []
        if not self.optimized:
            lines.append("# note: interpreter running without -O; timings include assertion overhead")
        lines.append(f"{'stage':<18}{'calls':>7}{'wall_s':>12}  counter")
        for r in self.rows:
            lines.append(f"{r.stage:<18}{r.calls:>7}{r.wall_s:>12.4f}  {r.counter}={r.count}")
        lines.append(f"temporal/full nodes   {self.ratio('temporal_search', 'full_search'):.4f}")
        lines.append(f"temporal/full time    {self.ratio('temporal_search', 'full_search', 'wall_s'):.4f}")
        lines.append(f"stereo/2xmono alpha   {self.ratio('stereo_render', 'mono_pair_render'):.4f}")
        lines.append(f"stereo/2xmono time    {self.ratio('stereo_render', 'mono_pair_render', 'wall_s'):.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["stage,calls,wall_s,counter,count"]
        out += [f"{r.stage},{r.calls},{r.wall_s!r},{r.counter},{r.count}" for r in self.rows]
        return "\n".join(out) + "\n"


def bench(tree, trajectory: Trajectory, intrinsics: dict | None = None, config: RenderConfig | None = None,
          baseline: float = 0.06, worker_count: int = 1) -> BenchReport:
    """Time each stage on every pose, next to its machine-independent work counter.

    Frame 0 runs only the full search; later frames run both searches on the
    same pose (temporal seeded by the previous frame's cut). Rendering compares
    the stereo path with two independent mono renders.
    """
    config = config or RenderConfig()
    intrinsics = dict(intrinsics or DEFAULT_INTRINSICS)
    intrinsics.setdefault("tile_size", config.tile_size)
    rows = {name: BenchRow(name, counter=c) for name, c in (
        ("full_search", "nodes_visited"), ("temporal_search", "nodes_visited"),
        ("preprocess", "splats"), ("sort", "splats"),
        ("stereo_render", "alpha_evals"), ("mono_pair_render", "alpha_evals"),
    )}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        rows[name].wall_s += time.perf_counter() - t0
        rows[name].calls += 1
        return out

    empty = tree is None or len(tree) == 0
    prev = None
    for pose in trajectory:
        if empty:
            continue
        camera = pose.camera(**intrinsics)
        rig = StereoRig(camera, baseline)
        if prev is None:
            full, _ = full_cut_search(tree, camera, config, worker_count)
        else:
            # both searches counted only on frames where the temporal one can run
            full, st = timed("full_search", full_cut_search, tree, camera, config, worker_count)
            rows["full_search"].count += st.nodes_visited
            _, st = timed("temporal_search", temporal_cut_search, tree, camera, prev, config, worker_count)
            rows["temporal_search"].count += st.nodes_visited
        prev = full
        gs = tree.gaussians.take(full.members)
        proj = timed("preprocess", preprocess, gs, rig, config)
        rows["preprocess"].count += len(proj)
        proj = timed("sort", depth_sort, proj)
        rows["sort"].count += len(proj)
        res = timed("stereo_render", rasterize_stereo, proj, rig, config)
        rows["stereo_render"].count += res.stats.stereo_alpha_evals
        mono_evals = 0

        def mono_pair():
            nonlocal mono_evals
            left = rasterize_mono(proj, camera, config)
            right_proj = preprocess(gs, StereoRig(rig.right, 0.0), config)
            right = rasterize_mono(depth_sort(right_proj), rig.right, config)
            mono_evals = left.alpha_evals + right.alpha_evals

        timed("mono_pair_render", mono_pair)
        rows["mono_pair_render"].count += mono_evals
    return BenchReport(list(rows.values()), optimized=bool(sys.flags.optimize))
