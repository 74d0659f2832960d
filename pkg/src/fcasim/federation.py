"""Synchronous federated round loop with FedAvg, FedProx, BFU and SFU aggregation.

Each round: install server-assigned parameters on every client, run ``N_e``
local epochs, collect one :class:`RoundMessage` per client behind a barrier,
aggregate, install the outcome and evaluate every client on its own
held-out split.

Adapter parameters travel per unit, keyed ``(layer, unit)``; the decoder is
always FedAvg-averaged; discriminators never leave the client.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, source_hash
from . import decomposer as dec
from . import heterodata as hd
from .config import ExperimentConfig
from .errors import FCAError, NumericalError, ProtocolError, ValidationError
from .metrics import dice_report, stability
from .model import SurrogateModel, save_checkpoint
from .numerics import Optimizer, OptimizerState, Tape

log = logging.getLogger(__name__)

UnitKey = tuple[int, int]
ScoreHook = Callable[[int, list[dec.ScoreTensor]], list[dec.ScoreTensor]]

CSV_COLUMNS = ("round", "client_id", "strategy", "train_loss", "pretext_loss", "eval_mdice", "global_unit_fraction")
STABILITY_WINDOW = 5
STABILITY_TAIL = 10


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Messages and outcomes


@dataclass
class RoundMessage:
    client_id: int
    round: int
    adapters: dict[UnitKey, np.ndarray]
    decoder: dict[str, np.ndarray]
    scores: list[dec.ScoreTensor]
    n_samples: int
    metrics: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "n_samples": self.n_samples,
            "adapters": [{"layer": l, "unit": u, "values": v.tolist()} for (l, u), v in self.adapters.items()],
            "decoder": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.decoder.items()},
            "scores": [s.to_json() for s in self.scores],
            "metrics": self.metrics,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RoundMessage":
        adapters = {(a["layer"], a["unit"]): np.asarray(a["values"], dtype=np.float64) for a in d["adapters"]}
        decoder = {
            k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["decoder"].items()
        }
        scores = [dec.ScoreTensor(s["layer"], np.asarray(s["scores"], dtype=np.float64), s["n_samples"]) for s in d["scores"]]
        return cls(d["client_id"], d["round"], adapters, decoder, scores, d["n_samples"], dict(d["metrics"]))


@dataclass
class StrategyOutcome:
    adapters: list[dict[UnitKey, np.ndarray]]  # one per client, in client order
    decoder: dict[str, np.ndarray]
    shared: bool
    diversity: list[np.ndarray] | None = None
    masks: list[dec.UnitMask] | None = None

    def global_unit_fraction(self, client: int) -> float:
        if self.masks is None:
            return 1.0
        return float(np.mean(np.concatenate([m.mask[:, client] for m in self.masks])))


def _weighted_mean(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    return np.tensordot(w, stack, axes=(0, 0))


def _check_messages(messages: list[RoundMessage], expected: int | None = None) -> list[RoundMessage]:
    if not messages:
        raise ProtocolError("no round messages to aggregate")
    msgs = sorted(messages, key=lambda m: m.client_id)
    ids = [m.client_id for m in msgs]
    k = expected if expected is not None else len(msgs)
    if ids != list(range(k)):
        raise ProtocolError(f"expected messages from clients 0..{k - 1}, got {ids}")
    rounds = {m.round for m in msgs}
    if len(rounds) != 1:
        raise ProtocolError(f"messages from different rounds {sorted(rounds)}")
    keys = list(msgs[0].adapters)
    dkeys = list(msgs[0].decoder)
    for m in msgs[1:]:
        if list(m.adapters) != keys or list(m.decoder) != dkeys:
            raise ProtocolError(f"client {m.client_id} parameter keys differ from client 0")
    return msgs


def _average_decoder(msgs: list[RoundMessage]) -> dict[str, np.ndarray]:
    n = np.array([m.n_samples for m in msgs], dtype=np.float64)
    return {k: _weighted_mean(np.stack([m.decoder[k] for m in msgs]), n) for k in msgs[0].decoder}


def aggregate_fedavg(messages: list[RoundMessage], expected: int | None = None) -> StrategyOutcome:
    """Sample-count weighted mean of every parameter; one shared set."""
    msgs = _check_messages(messages, expected)
    n = np.array([m.n_samples for m in msgs], dtype=np.float64)
    if n.sum() <= 0:
        n = np.ones_like(n)
    shared = {key: _weighted_mean(np.stack([m.adapters[key] for m in msgs]), n) for key in msgs[0].adapters}
    return StrategyOutcome([shared] * len(msgs), _average_decoder(msgs), shared=True)


def _layer_scores(msgs: list[RoundMessage], override: list[dec.ScoreTensor] | None) -> list[dec.ScoreTensor]:
    if override is not None:
        return override
    if any(not m.scores for m in msgs):
        raise ProtocolError("tailored aggregation needs score tensors from every client")
    return [dec.average_scores([m.scores[l] for m in msgs]) for l in range(len(msgs[0].scores))]


def _units_by_layer(keys) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for layer, unit in keys:
        out.setdefault(layer, []).append(unit)
    return out


def aggregate_bfu(
    messages: list[RoundMessage],
    delta: float,
    scores: list[dec.ScoreTensor] | None = None,
    expected: int | None = None,
) -> StrategyOutcome:
    """Binary updating: average each unit over the clients that mark it global.

    Clients whose mask is 0 for a unit keep their own post-training values.
    """
    msgs = _check_messages(messages, expected)
    layer_scores = _layer_scores(msgs, scores)
    d = [dec.diversity(s) for s in layer_scores]
    masks = [dec.binarize(x, delta) for x in d]
    k = len(msgs)
    per_client: list[dict[UnitKey, np.ndarray]] = [dict() for _ in range(k)]
    for layer, units in _units_by_layer(msgs[0].adapters).items():
        m = masks[layer].mask
        for u in units:
            key = (layer, u)
            stack = np.stack([msg.adapters[key] for msg in msgs])
            sel = m[u].astype(np.float64)
            pooled = _weighted_mean(stack, sel) if sel.sum() > 0 else None
            for c in range(k):
                per_client[c][key] = pooled if m[u, c] == 1 else stack[c].copy()
    return StrategyOutcome(per_client, _average_decoder(msgs), shared=False, diversity=d, masks=masks)


def aggregate_sfu(
    messages: list[RoundMessage],
    scores: list[dec.ScoreTensor] | None = None,
    delta: float | None = None,
    expected: int | None = None,
) -> StrategyOutcome:
    """Smooth updating: destination client ``j`` gets ``sum_k |S[u,k,j]| W[u,k] / sum_k |S[u,k,j]|``.

    ``delta`` only feeds the logged global-unit diagnostic.
    """
    msgs = _check_messages(messages, expected)
    layer_scores = _layer_scores(msgs, scores)
    k = len(msgs)
    per_client: list[dict[UnitKey, np.ndarray]] = [dict() for _ in range(k)]
    for layer, units in _units_by_layer(msgs[0].adapters).items():
        weights = np.abs(layer_scores[layer].scores)  # U x K(source) x K(destination)
        for u in units:
            key = (layer, u)
            stack = np.stack([msg.adapters[key] for msg in msgs])
            for j in range(k):
                w = weights[u, :, j]
                if w.sum() < dec.ZERO_MASS:
                    log.info("sfu: zero score mass for layer %d unit %d client %d, using plain mean", layer, u, j)
                    w = np.ones(k)
                per_client[j][key] = _weighted_mean(stack, w)
    d = [dec.diversity(s) for s in layer_scores] if k >= 2 else None
    masks = [dec.binarize(x, delta) for x in d] if (d is not None and delta is not None) else None
    return StrategyOutcome(per_client, _average_decoder(msgs), shared=False, diversity=d, masks=masks)


# --------------------------------------------------------------------------
# Clients


@dataclass
class ClientData:
    train_images: np.ndarray
    train_masks: np.ndarray
    eval_images: np.ndarray
    eval_masks: np.ndarray
    transform: str


class ClientState:
    """One simulated participant: model, optimizers, private data and RNG stream."""

    def __init__(self, client_id: int, model: SurrogateModel, data: ClientData, cfg: ExperimentConfig, rng: np.random.Generator):
        self.client_id = client_id
        self.model = model
        self.data = data
        self.cfg = cfg
        self.rng = rng
        self.round = 0
        o = cfg.optim
        self.main_opt = Optimizer(
            model.main_parameters(),
            OptimizerState(o.kind, o.lr, o.weight_decay, o.beta1, o.beta2, o.eps),
        )
        self.disc_opt = Optimizer(
            model.discriminator_parameters(),
            OptimizerState(o.disc_kind, o.disc_lr, o.weight_decay, o.beta1, o.beta2, o.eps),
        )
        # block 0 is frozen and sees fixed inputs
        self.train_stem = model.stem(data.train_images) if len(data.train_images) else data.train_images
        self.eval_stem = model.stem(data.eval_images) if len(data.eval_images) else data.eval_images

    @property
    def n_train(self) -> int:
        return len(self.data.train_images)

    # -- parameter exchange ------------------------------------------------

    def adapter_snapshot(self) -> dict[UnitKey, np.ndarray]:
        return {(l, u): self.model.unit_vector(l, u) for l, u, _ in self.model.enumerate_units()}

    def decoder_snapshot(self) -> dict[str, np.ndarray]:
        return {"weight": self.model.decoder_weight.value.copy(), "bias": self.model.decoder_bias.value.copy()}

    def install(self, adapters: dict[UnitKey, np.ndarray], decoder: dict[str, np.ndarray]) -> None:
        for (l, u), vec in adapters.items():
            self.model.set_unit_vector(l, u, vec)
        self.model.decoder_weight.value[...] = decoder["weight"]
        self.model.decoder_bias.value[...] = decoder["bias"]

    # -- training ------------------------------------------------------------

    def compute_scores(self, batch_size: int) -> list[dec.ScoreTensor]:
        accs = [dec.ScoreAccumulator(ad.layer_id) for ad in self.model.adapters]
        for start in range(0, self.n_train, batch_size):
            fr = self.model.forward(stem_out=self.train_stem[start : start + batch_size])
            for ad, acc, a in zip(self.model.adapters, accs, fr.adapter_outputs):
                probs, f_d = self.model.gld_forward(ad.layer_id, a)
                acc.add_features(f_d, ad.gld.weight.value, probs)
        return [acc.result() for acc in accs]

    def evaluate(self, batch_size: int = 64) -> float:
        if len(self.data.eval_images) == 0:
            return float("nan")
        logits = np.concatenate(
            [
                self.model.forward(stem_out=self.eval_stem[s : s + batch_size]).logits
                for s in range(0, len(self.eval_stem), batch_size)
            ]
        )
        return dice_report(logits, self.data.eval_masks).mdice


def compute_gradients(
    model: SurrogateModel,
    stem_out: np.ndarray,
    masks: np.ndarray,
    client_index: int,
    pretext: bool = True,
    prox: tuple[float, list[np.ndarray]] | None = None,
) -> tuple[float, float]:
    """One forward/backward pass; gradients accumulate into the model's parameters.

    Returns ``(segmentation loss, pretext loss)`` (pretext is NaN when disabled).
    """
    tape = Tape()
    fr = model.forward(stem_out=stem_out, tape=tape)
    seg = tape.binary_cross_entropy(fr.logits, masks)
    total = seg
    if prox is not None and prox[0] > 0.0:
        mu, anchors = prox
        total = tape.add(total, tape.proximal(model.main_parameters(), anchors, mu))
    pre_val = float("nan")
    if pretext:
        pre, _, _ = model.pretext_loss(fr.adapter_outputs, client_index, tape)
        total = tape.add(total, pre)
        pre_val = float(pre)
    tape.backward(total)
    return float(seg), pre_val


def local_train(client: ClientState, epochs: int, round_index: int) -> RoundMessage:
    cfg = client.cfg
    bs = cfg.optim.batch_size
    model = client.model
    prox = None
    if cfg.federation.strategy == "fedprox":
        prox = (cfg.federation.prox_mu, [p.value.copy() for p in model.main_parameters()])
    seg_losses, pre_losses = [], []
    for _ in range(epochs):
        order = client.rng.permutation(client.n_train)
        for b, start in enumerate(range(0, client.n_train, bs)):
            idx = order[start : start + bs]
            seg, pre = compute_gradients(
                model, client.train_stem[idx], client.data.train_masks[idx], client.client_id, cfg.federation.pretext, prox
            )
            if not np.isfinite(seg) or (cfg.federation.pretext and not np.isfinite(pre)):
                raise NumericalError(f"non-finite loss at round {round_index}, client {client.client_id}, batch {b}")
            client.main_opt.step()
            if cfg.federation.pretext:
                client.disc_opt.step()
            else:
                client.disc_opt.zero_grad()
            seg_losses.append(seg)
            pre_losses.append(pre)
    client.round = round_index
    scores = client.compute_scores(bs) if client.n_train else []
    metrics = {
        "train_loss": float(np.mean(seg_losses)) if seg_losses else float("nan"),
        "pretext_loss": float(np.mean(pre_losses)) if pre_losses and cfg.federation.pretext else float("nan"),
    }
    return RoundMessage(
        client.client_id,
        round_index,
        client.adapter_snapshot(),
        client.decoder_snapshot(),
        scores,
        client.n_train,
        metrics,
    )


# --------------------------------------------------------------------------
# Server


class ServerState:
    """Collects one message per client per round and aggregates behind a barrier."""

    def __init__(self, cfg: ExperimentConfig, initial_adapters, initial_decoder, score_hook: ScoreHook | None = None):
        self.cfg = cfg
        self.strategy = cfg.federation.strategy
        self.num_clients = cfg.federation.num_clients
        self.round = 0
        self.global_adapters = {k: v.copy() for k, v in initial_adapters.items()}
        self.global_decoder = {k: v.copy() for k, v in initial_decoder.items()}
        self.inbox: dict[int, RoundMessage] = {}
        self.score_hook = score_hook

    def begin_round(self, t: int) -> None:
        if t != self.round + 1:
            raise ProtocolError(f"round {t} started after round {self.round}")
        self.round = t
        self.inbox.clear()

    def receive(self, msg: RoundMessage) -> None:
        if msg.round != self.round:
            raise ProtocolError(f"message from round {msg.round} delivered during round {self.round}")
        if msg.client_id in self.inbox:
            raise ProtocolError(f"duplicate message from client {msg.client_id} in round {self.round}")
        if not 0 <= msg.client_id < self.num_clients:
            raise ProtocolError(f"unknown client {msg.client_id}")
        self.inbox[msg.client_id] = msg

    def aggregate(self) -> StrategyOutcome:
        if len(self.inbox) != self.num_clients:
            missing = sorted(set(range(self.num_clients)) - set(self.inbox))
            raise ProtocolError(f"round {self.round}: missing messages from clients {missing}")
        msgs = [self.inbox[k] for k in range(self.num_clients)]
        scores = None
        if self.strategy in ("bfu", "sfu") and self.score_hook is not None:
            scores = self.score_hook(self.round, _layer_scores(msgs, None))
        f = self.cfg.federation
        if self.strategy in ("fedavg", "fedprox"):
            out = aggregate_fedavg(msgs, self.num_clients)
        elif self.strategy == "bfu":
            out = aggregate_bfu(msgs, f.delta, scores, self.num_clients)
        else:
            out = aggregate_sfu(msgs, scores, f.delta, self.num_clients)
        if out.shared:
            self.global_adapters = {k: v.copy() for k, v in out.adapters[0].items()}
        self.global_decoder = {k: v.copy() for k, v in out.decoder.items()}
        return out


# --------------------------------------------------------------------------
# Experiment driver


@dataclass
class RunReport:
    config: ExperimentConfig
    rows: list[dict]
    summary: dict
    snapshots: dict[int, dict]
    clients: list[ClientState]

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else repr(x)
    return str(x)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def build_clients(cfg: ExperimentConfig) -> list[ClientState]:
    d, f = cfg.data, cfg.federation
    ds = hd.generate_task(cfg.seeds.data, d.n_samples, d.image_size, d.num_classes)
    plan = hd.dirichlet_partition(ds.labels, f.num_clients, d.alpha, derive_seed(cfg.seeds.data, 1))
    streams = np.random.SeedSequence(derive_seed(cfg.seeds.train, 2)).spawn(f.num_clients)
    clients = []
    for k, (idx, tf) in enumerate(zip(plan.indices, cfg.client_transforms())):
        tr, ev = hd.train_eval_split(idx, d.eval_fraction, derive_seed(cfg.seeds.data, 3, k))
        data = ClientData(
            hd.transform_images(ds.images[tr], tf),
            ds.masks[tr],
            hd.transform_images(ds.images[ev], tf),
            ds.masks[ev],
            tf,
        )
        model = SurrogateModel(cfg.model, f.num_clients, d.num_classes, d.image_size, cfg.seeds.model)
        clients.append(ClientState(k, model, data, cfg, np.random.default_rng(streams[k])))
    return clients


def _snapshot_json(t: int, out: StrategyOutcome) -> dict:
    return {
        "round": t,
        "delta": out.masks[0].delta if out.masks else None,
        "layers": [
            {
                "layer": l,
                "diversity": out.diversity[l].tolist(),
                "mask": out.masks[l].mask.tolist() if out.masks else None,
            }
            for l in range(len(out.diversity))
        ],
    }


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    score_hook: ScoreHook | None = None,
    parallel: bool | None = None,
) -> RunReport:
    cfg.validate()
    t0 = time.perf_counter()
    f = cfg.federation
    parallel = f.parallel if parallel is None else parallel
    clients = build_clients(cfg)
    server = ServerState(cfg, clients[0].adapter_snapshot(), clients[0].decoder_snapshot(), score_hook)
    rows: list[dict] = []
    snapshots: dict[int, dict] = {}
    scores0 = [c.evaluate() for c in clients]
    curve = [float(np.mean(scores0))]
    for c, s in zip(clients, scores0):
        rows.append(_row(0, c.client_id, f.strategy, float("nan"), float("nan"), s, float("nan")))
    pool = ThreadPoolExecutor(max_workers=f.num_clients) if parallel else None
    try:
        for t in range(1, f.rounds + 1):
            server.begin_round(t)

            def work(c: ClientState, t=t):
                try:
                    return local_train(c, f.local_epochs, t)
                except FCAError:
                    raise
                except Exception as exc:
                    raise FCAError(f"round {t}, client {c.client_id}: {exc}") from exc

            msgs = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            for m in msgs:
                server.receive(m)
            out = server.aggregate()
            for c in clients:
                c.install(out.adapters[c.client_id], out.decoder)
            if out.diversity is not None and (t % cfg.output.mask_every == 0 or t == f.rounds):
                snapshots[t] = _snapshot_json(t, out)
            scores = [c.evaluate() for c in clients]
            curve.append(float(np.mean(scores)))
            for c, m, s in zip(clients, msgs, scores):
                rows.append(
                    _row(t, c.client_id, f.strategy, m.metrics["train_loss"], m.metrics["pretext_loss"], s, out.global_unit_fraction(c.client_id))
                )
    finally:
        if pool:
            pool.shutdown()
    summary = _summary(cfg, rows, curve, time.perf_counter() - t0)
    report = RunReport(cfg, rows, summary, snapshots, clients)
    if out_dir is not None:
        write_run(report, out_dir)
    return report


def _row(t, k, strategy, train_loss, pretext_loss, mdice, guf) -> dict:
    return {
        "round": t,
        "client_id": k,
        "strategy": strategy,
        "train_loss": float(train_loss),
        "pretext_loss": float(pretext_loss),
        "eval_mdice": float(mdice),
        "global_unit_fraction": float(guf),
    }


def tail_stability(curve: list[float], tail: int = STABILITY_TAIL, window: int = STABILITY_WINDOW) -> float | None:
    """Mean rolling std (population, width ``window``) over the last ``tail`` rounds."""
    seg = curve[-tail:]
    if len(seg) < window:
        return None
    return stability(seg, window).mean_rolling_std


def _summary(cfg: ExperimentConfig, rows: list[dict], curve: list[float], wall: float) -> dict:
    k = cfg.federation.num_clients
    final_round = cfg.federation.rounds
    final = [r["eval_mdice"] for r in rows if r["round"] == final_round]
    rtt = None
    if len(curve) >= STABILITY_WINDOW:
        rtt = stability(curve, STABILITY_WINDOW).rounds_to_threshold
    guf = [r["global_unit_fraction"] for r in rows if r["round"] > 0]
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "version": __version__,
        "source_hash": source_hash(),
        "strategy": cfg.federation.strategy,
        "num_clients": k,
        "rounds": final_round,
        "per_client_final_mdice": final,
        "mean_final_mdice": float(np.mean(final)),
        "eval_curve": curve,
        "stability": {
            "window": STABILITY_WINDOW,
            "tail_rounds": STABILITY_TAIL,
            "tail_rolling_std": tail_stability(curve),
            "rounds_to_90pct": rtt,
        },
        "mean_global_unit_fraction": float(np.mean(guf)) if guf else None,
        "wall_time_s": wall,
    }


def write_run(report: RunReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = report.config
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "version.json").write_text(
        json.dumps({"version": __version__, "source_hash": source_hash(), "config_hash": cfg.hash()}, indent=2) + "\n"
    )
    (out / "round_log.csv").write_text(report.csv_text())
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2) + "\n")
    if report.snapshots:
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        for t, snap in report.snapshots.items():
            (mdir / f"round_{t:04d}.json").write_text(json.dumps(snap) + "\n")
    if cfg.output.checkpoints:
        cdir = out / "checkpoints"
        cdir.mkdir(exist_ok=True)
        for c in report.clients:
            save_checkpoint(cdir / f"client_{c.client_id}.ckpt", c.model.registry, cfg.hash())
    return out


def load_summary(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read summary {path}: {exc}") from exc
    for key in ("strategy", "num_clients", "per_client_final_mdice", "mean_final_mdice"):
        if key not in data:
            raise ValidationError(f"{path}: summary lacks {key!r}")
    return data
