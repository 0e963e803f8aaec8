"""Supervisor/worker execution of the likelihood and prediction passes.

Every worker runs the same state machine over the transport:

1. prior quantities for its working regions, level by level from the root;
2. finest regions of its own range (prior and leaf posterior fused, so the
   finest-level matrices never pile up), summed per parent right away;
3. the ascending pass over levels M-1 .. 1. For a region whose children are
   spread over several workers, every contributor ships its partial sum to
   the supervisor and forgets the region; the supervisor adds the partial
   sums in worker-id order and integrates the region out;
4. d/u scalars are gathered on worker 0, which sums them in canonical region
   order and assembles the log-likelihood;
5. prediction only: region posteriors travel top-down from each region's
   holder to every worker that needs them, then each worker predicts the
   queries falling into its own finest regions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from time import perf_counter, thread_time

import numpy as np

from pymra.core import (
    LOG_2PI,
    ATildeTracker,
    Message,
    assemble_loglik,
    chain_moments,
    descend,
    eliminate,
    leaf_posterior,
    leaf_values,
    pair_count,
    predict_leaf,
    region_prior,
    spill_load,
    spill_store,
)
from pymra.errors import StructureError
from pymra.executor.lanes import LanePool
from pymra.executor.plan import WorkerAssignment, make_assignment
from pymra.executor.transport import get_transport
from pymra.kernel import CovarianceParams
from pymra.partition import PartitionTree

log = logging.getLogger(__name__)

MODES = ("likelihood", "prediction")
LEAF_BATCH = 64


@dataclass
class WorkerPredictions:
    """Predictions made by one worker; ``index`` points into the query list."""

    index: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class RunResult:
    mode: str
    p: int
    lanes: int
    dynamic: bool
    transport: str
    loglik: float
    n_obs: int
    timings: list = field(default_factory=list)
    peak_atilde_bytes: list = field(default_factory=list)
    merge_events: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    messages_sent: list = field(default_factory=list)
    processed: list = field(default_factory=list)

    @property
    def loglik_without_constant(self) -> float:
        return self.loglik + 0.5 * self.n_obs * LOG_2PI

    def phase_time(self, phase: str) -> float:
        """Elapsed time of ``phase``: the slowest worker decides."""
        return max((t.get(phase, 0.0) for t in self.timings), default=0.0)

    def gathered_predictions(self, n_queries: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-worker predictions scattered back into query order."""
        mean = np.full(n_queries, np.nan)
        var = np.full(n_queries, np.nan)
        for wp in self.predictions:
            mean[wp.index] = wp.mean
            var[wp.index] = wp.variance
        return mean, var


@dataclass
class _Job:
    mode: str
    tree: PartitionTree
    params: CovarianceParams
    y: np.ndarray
    plan: WorkerAssignment
    lanes: int
    dynamic: bool
    spill_dir: object
    query_points: np.ndarray | None
    query_pos: np.ndarray | None


def _pack(msg: Message) -> np.ndarray:
    if msg.A is None:
        return np.empty(0)
    return np.concatenate([msg.A.ravel(), msg.omega.ravel()])


def _unpack(payload: np.ndarray, level: int, r: int) -> Message:
    if payload.size == 0:
        return Message(None, None)
    na = pair_count(level) * r * r
    A = payload[:na].reshape(pair_count(level), r, r).copy()
    omega = payload[na:].reshape(level, r).copy()
    return Message(A, omega)


def _add_into(total: Message, extra: Message, tracker: ATildeTracker) -> Message:
    if extra.A is None:
        return total
    if total.A is None:
        return extra
    total.A += extra.A
    tracker.remove(extra.A)
    return Message(total.A, total.omega + extra.omega)


class _Store:
    """Pending pass-up messages of one worker, optionally parked on disk."""

    def __init__(self, rank: int, spill_dir, tracker: ATildeTracker):
        self.rank = rank
        self.spill_dir = spill_dir
        self.tracker = tracker
        self._msgs: dict = {}

    def _key(self, region: int) -> str:
        return f"{region}_w{self.rank}"

    def put(self, region: int, msg: Message) -> None:
        if self.spill_dir is not None:
            spill_store(self._key(region), msg.A, self.spill_dir)
            self.tracker.remove(msg.A)
            msg = Message(None, msg.omega, spilled=True)
        self._msgs[region] = msg

    def take(self, region: int) -> Message:
        msg = self._msgs.pop(region)
        if msg.spilled:
            A = spill_load(self._key(region), self.spill_dir)
            self.tracker.add(A)
            msg = Message(A, msg.omega)
        return msg


def _sum_children(kids, store: _Store, tracker: ATildeTracker) -> Message:
    total = Message(None, None)
    for c in kids:
        msg = store.take(c)
        if msg.A is None:
            continue
        if total.A is None:
            total = msg
        else:
            total.A += msg.A
            tracker.remove(msg.A)
            total = Message(total.A, total.omega + msg.omega)
    return total


def _worker_main(ep, job: _Job):
    w = ep.rank
    tree, params, plan, y = job.tree, job.params, job.plan, job.y
    r, M = tree.r_hat, tree.M
    predicting = job.mode == "prediction"
    tracker = ATildeTracker()
    store = _Store(w, job.spill_dir, tracker)
    timings: dict = {}
    events: list = []
    working = plan.working[w]
    own = list(plan.ranges[w])
    query_regions: set = set()
    if predicting and job.query_pos is not None:
        query_regions = {int(k) for k in np.unique(job.query_pos) if int(k) in plan.ranges[w]}

    with LanePool(job.lanes, job.dynamic) as lanes:
        # 1. prior quantities of the pre-finest working regions
        t0 = perf_counter()
        prior: dict = {}
        for m in range(1, M):
            regs = [int(i) for i in tree.by_level[m] if int(i) in working]
            computed = lanes.map(lambda i: region_prior(tree, params, i, prior), regs)
            prior.update(zip(regs, computed))
        timings["prior"] = perf_counter() - t0

        # 2. finest regions, fused prior + leaf posterior, summed per parent
        t0 = perf_counter()
        c0 = thread_time()
        d: dict = {}
        u: dict = {}
        conds: dict = {}

        def leaf(pos):
            f = int(tree.finest[pos])
            pq = region_prior(tree, params, f, prior)
            yl = leaf_values(tree, y, pos)
            dd, uu, msg = leaf_posterior(tree, pq, yl)
            tracker.add(msg.A)
            return f, dd, uu, msg, (pq if pos in query_regions else None)

        partial: dict = {}
        for start in range(0, len(own), LEAF_BATCH):
            for f, dd, uu, msg, pq in lanes.map(leaf, own[start : start + LEAF_BATCH]):
                d[f], u[f] = dd, uu
                if pq is not None:
                    prior[f] = pq
                if M == 1:
                    continue
                parent = int(tree.parent[f])
                total = partial.pop(parent, Message(None, None))
                partial[parent] = _add_into(total, msg, tracker) if msg.A is not None else total
        for parent in sorted(partial):
            store.put(parent, partial.pop(parent))

        # 3. ascending pass with merges
        for m in range(M - 1, 0, -1):
            involved = plan.involved(w, tree, m)
            aggs: dict = {}
            for i in involved:
                if m == M - 1:
                    aggs[i] = store.take(i)
                else:
                    kids = [int(c) for c in tree.children[i] if plan.holder[c] == w]
                    aggs[i] = _sum_children(kids, store, tracker)
                if plan.holder[i] != w:
                    msg = aggs.pop(i)
                    ep.send(int(plan.supervisor[i]), ("merge", i), _pack(msg))
                    tracker.remove(msg.A)
                    events.append((m, i, "contributor"))
            held = [i for i in involved if plan.holder[i] == w]
            for i in held:
                for c in plan.contributors.get(i, ()):
                    incoming = _unpack(ep.recv(c, ("merge", i)), m, r)
                    tracker.add(incoming.A)
                    aggs[i] = _add_into(aggs[i], incoming, tracker)
                if plan.contributors.get(i):
                    events.append((m, i, "supervisor"))
            results = lanes.map(lambda i: eliminate(aggs.pop(i), m, r, tracker, predicting), held)
            for i, (dd, uu, msg, cond) in zip(held, results):
                d[i], u[i] = dd, uu
                if predicting:
                    conds[i] = cond
                if m > 1:
                    store.put(i, msg)
        timings["posterior"] = perf_counter() - t0
        timings["posterior_cpu"] = thread_time() - c0

        # 4. reduction of the scalar terms on worker 0
        gathered = ep.gather((d, u), tag="du")
        loglik = None
        if w == 0:
            d_all: dict = {}
            u_all: dict = {}
            for dw, uw in gathered:
                d_all.update(dw)
                u_all.update(uw)
            if len(d_all) != tree.n_regions:
                raise StructureError(f"reduction saw {len(d_all)} of {tree.n_regions} regions")
            order = range(tree.n_regions)
            loglik = assemble_loglik(
                tree.n_obs, float(sum(d_all[i] for i in order)), float(sum(u_all[i] for i in order))
            )

        # 5. prediction
        preds = None
        if predicting:
            t0 = perf_counter()
            posts: dict = {}
            for m in range(1, M):
                regs = [int(i) for i in tree.by_level[m] if int(i) in working]
                held = [i for i in regs if plan.holder[i] == w]

                def down(i):
                    cm, cc = chain_moments(tree.ancestors(i)[:-1], posts, r)
                    return descend(conds[i], cm, cc, r)

                for i, post in zip(held, lanes.map(down, held)):
                    posts[i] = post
                    for other in plan.needers(i):
                        if other != w:
                            ep.send(other, ("post", i), post)
                for i in regs:
                    if i not in posts:
                        posts[i] = ep.recv(int(plan.holder[i]), ("post", i))
            preds = _predict_own(job, w, prior, posts, lanes)
            timings["predict"] = perf_counter() - t0

    return {
        "loglik": loglik,
        "timings": timings,
        "peak": tracker.peak,
        "events": events,
        "processed": sorted(d),
        "predictions": preds,
        "sent": ep.sent_messages,
    }


def _predict_own(job: _Job, w: int, prior: dict, posts: dict, lanes: LanePool) -> WorkerPredictions:
    tree, plan = job.tree, job.plan
    pos = job.query_pos
    rg = plan.ranges[w]
    mine = np.flatnonzero((pos >= rg.start) & (pos < rg.stop)) if len(rg) else np.empty(0, dtype=np.int64)
    order = np.argsort(pos[mine], kind="stable")
    mine = mine[order]
    if w == 0:
        outside = np.flatnonzero(pos < 0)
        mine = np.concatenate([mine, outside])
    mean = np.full(len(mine), np.nan)
    var = np.full(len(mine), np.nan)
    groups = []
    if len(mine):
        inside = pos[mine] >= 0
        for k in np.unique(pos[mine][inside]):
            groups.append((int(k), np.flatnonzero(pos[mine] == k)))

    def one(item):
        k, sel = item
        f = int(tree.finest[k])
        cm, cc = chain_moments(tree.ancestors(f)[:-1], posts, tree.r_hat)
        return predict_leaf(
            tree, job.params, f, job.query_points[mine[sel]], prior, leaf_values(tree, job.y, k), cm, cc
        )

    for (k, sel), (mu, sv) in zip(groups, lanes.map(one, groups)):
        mean[sel], var[sel] = mu, sv
    return WorkerPredictions(mine, mean, var)


def run_parallel(
    mode: str,
    tree: PartitionTree,
    params: CovarianceParams,
    y,
    p: int = 1,
    dynamic: bool = False,
    transport: str = "thread",
    lanes: int = 1,
    spill_dir=None,
    locations=None,
) -> RunResult:
    """Run the likelihood (or likelihood plus prediction) passes on ``p`` workers.

    ``y`` is indexed like the observation set the tree was built from.
    ``locations`` are the prediction queries for ``mode="prediction"``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown executor mode {mode!r}; expected one of {MODES}")
    plan = make_assignment(tree, p, dynamic)
    query_points = query_pos = None
    if mode == "prediction":
        query_points = np.asarray(locations if locations is not None else np.empty((0, 2)), dtype=np.float64)
        query_points = query_points.reshape(-1, 2)
        query_pos = tree.locate(query_points[:, 0], query_points[:, 1])
        outside = int(np.sum(query_pos < 0))
        if outside:
            log.warning("%d prediction locations fall outside the domain", outside)
    job = _Job(
        mode, tree, params, np.asarray(y, dtype=np.float64), plan, lanes, dynamic, spill_dir, query_points, query_pos
    )
    outs = get_transport(transport).run(p, lambda ep: _worker_main(ep, job))
    return RunResult(
        mode=mode,
        p=p,
        lanes=lanes,
        dynamic=dynamic,
        transport=transport,
        loglik=outs[0]["loglik"],
        n_obs=tree.n_obs,
        timings=[o["timings"] for o in outs],
        peak_atilde_bytes=[o["peak"] for o in outs],
        merge_events=[o["events"] for o in outs],
        predictions=[o["predictions"] for o in outs] if mode == "prediction" else [],
        messages_sent=[o["sent"] for o in outs],
        processed=[o["processed"] for o in outs],
    )
