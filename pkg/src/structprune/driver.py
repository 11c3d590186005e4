"""Progressive compression runs: baseline, rounds of search -> ADMM -> hard
prune + retrain, then purification and shrinking; plus train-from-scratch
comparisons, checkpoints and the CSV report."""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path


from .admm import ADMMConfig, admm_regularize, hard_prune_retrain
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import digits_dataset, load_dataset, synth_dataset
from .errors import ConfigError, InfeasibleError
from .models import build_network, reinitialize
from .purification import propagate_masks, purify, search_thresholds, shrink_network
from .schemes import apply_mask, count_flops, count_params, magnitude_prune
from .search import SPLITS, Action, SAConfig, sa_run
from .seeding import derive_seed
from .training import evaluate_accuracy, train

log = logging.getLogger(__name__)

REPORT_HEADER = "round,phase,objective,params_rate,flops_rate,accuracy,wall_seconds,action_digest"


@dataclass
class RoundRecord:
    round: int
    phase: str
    objective: str
    params_rate: float
    flops_rate: float
    accuracy: float
    wall_seconds: float
    action_digest: str = ""
    accuracy_before: float = float("nan")
    target: float = float("nan")

    def csv_row(self):
        return (f"{self.round},{self.phase},{self.objective},{self.params_rate:.6f},{self.flops_rate:.6f},"
                f"{self.accuracy:.6f},{self.wall_seconds:.3f},{self.action_digest}")


@dataclass
class RunReport:
    baseline_accuracy: float
    floor: float
    dense_params: int
    dense_flops: int
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    aborted: str = ""
    scratch: dict = field(default_factory=dict)

    def to_csv(self):
        return "\n".join([REPORT_HEADER] + [r.csv_row() for r in self.rows]) + "\n"

    def to_json(self):
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["rows"] = [RoundRecord(**r) for r in d["rows"]]
        return cls(**d)

    def final(self):
        return self.rows[-1] if self.rows else None

    def summary(self):
        out = [f"baseline accuracy {self.baseline_accuracy:.4f}, floor {self.floor:.4f}"]
        for r in self.rows:
            out.append(f"  round {r.round} {r.phase:<8} params {r.params_rate:7.2f}x  flops {r.flops_rate:7.2f}x"
                       f"  accuracy {r.accuracy:.4f}")
        if self.scratch:
            s = self.scratch
            out.append(f"  from scratch: accuracy {s['scratch_accuracy']:.4f} vs pruned {s['pruned_accuracy']:.4f}"
                       f" (gap {s['gap']:+.4f})")
        out += [f"  note: {n}" for n in self.notes]
        if self.aborted:
            out.append(f"  ABORTED: {self.aborted}")
        return "\n".join(out)

    def with_compare_view(self):
        """Rows without timings: two runs agree iff these agree."""
        return [(r.round, r.phase, r.objective, round(r.params_rate, 9), round(r.flops_rate, 9),
                 round(r.accuracy, 9), r.action_digest) for r in self.rows], self.aborted, self.notes


# -- data and baseline --------------------------------------------------------

def load_data(config):
    """``(train, validation, test)`` splits for ``config``."""
    if config.dataset == "digits":
        full = digits_dataset(28)
    elif config.dataset == "synth":
        s = config.synth_size
        full = synth_dataset(derive_seed(config.seed, "synth"), config.synth_n, config.synth_classes, (1, s, s))
    elif config.dataset in ("idx", "cifar10"):
        if not config.data_path:
            raise ConfigError(f"dataset {config.dataset} needs data_path")
        full = load_dataset(config.data_path, config.dataset, config.labels_path or None)
    else:
        raise ConfigError(f"unknown dataset {config.dataset!r}")
    rest, test = full.split_off(config.test_fraction, derive_seed(config.seed, "split-test"))
    if config.val_fraction > 0:
        train_set, val = rest.split_off(config.val_fraction, derive_seed(config.seed, "split-val"), name="val")
    else:
        train_set, val = rest, rest
    return train_set, val, test


def new_network(config, data):
    ds = data[0]
    return build_network(config.arch, derive_seed(config.seed, "init"), tuple(ds.image_shape), ds.num_classes)


def train_baseline(config, data):
    net = new_network(config, data)
    net, _ = train(net, data[0], config.epochs, lr=config.lr, batch=config.batch,
                   seed=derive_seed(config.seed, "baseline"))
    return net, evaluate_accuracy(net, data[2])


def admm_config(config, t):
    return ADMMConfig(rho0=config.rho0, iterations=config.admm_iterations, epochs_per_iteration=config.admm_epochs,
                      retrain_epochs=config.retrain_epochs, drop_pruned_bias=config.drop_pruned_bias,
                      lr=config.lr, batch=config.batch,
                      seed=derive_seed(config.seed, f"admm-round-{t}"))


def rates(network, report):
    """Cumulative conv params / FLOPs rates relative to the dense baseline."""
    return (report.dense_params / count_params(network).conv, report.dense_flops / count_flops(network).conv)


def compact_rate(network, report):
    return report.dense_params / count_params(propagate_masks(network)).conv


# -- phase II -----------------------------------------------------------------

def budget_target(network, report, config, target):
    """Largest round target up to ``target`` whose uniform magnitude-pruned
    estimate stays within ``config.budget_rate`` once propagated. Capping in
    compact terms matters for filter pruning, where removing a layer's filters
    also removes the next layer's columns."""
    split = SPLITS.get(config.scheme, 0.5)

    def compact(m):
        masks = magnitude_prune(network, Action.uniform(network, m, split))
        return compact_rate(apply_mask(network, masks), report)

    if compact(target) <= config.budget_rate:
        return target
    lo, hi = 1.0, target
    for _ in range(30):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if compact(mid) <= config.budget_rate else (lo, mid)
    return lo


def phase_two(network, config, data, tag, report=None):
    min_params = 0
    if config.budget_rate > 0 and report is not None:
        min_params = math.ceil(report.dense_params / config.budget_rate)
    search = search_thresholds(
        network, data[1], config.epsilon,
        SAConfig(iterations=config.purify_iterations, warmup=config.sa_warmup,
                 t_stop_ratio=config.sa_t_stop_ratio, seed=derive_seed(config.seed, f"purify-{tag}")),
        scheme=config.scheme,
        min_params=min_params,
    )
    return purify(network, search.config), search


# -- checkpoints --------------------------------------------------------------

def _meta(report, stage, t, config):
    return {"stage": stage, "round": t, "report": report.to_json(), "objective": config.objective,
            "seed": config.seed}


def latest_checkpoint(path):
    """Resolve ``path`` (a checkpoint or a run directory) to the newest round checkpoint."""
    path = Path(path)
    if path.is_file():
        return path
    found = sorted(path.glob("round-*.acmp"), key=lambda p: int(re.findall(r"\d+", p.stem)[-1]))
    if found:
        return found[-1]
    if (path / "baseline.acmp").exists():
        return path / "baseline.acmp"
    raise ConfigError(f"no checkpoint to resume from in {path}")


# -- the run ------------------------------------------------------------------

@dataclass
class RunResult:
    report: RunReport
    network: object  # shrunk final network (None when aborted)
    masked: object  # last masked network before shrinking
    output_dir: Path


def _write_report(report, out):
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary() + "\n")


def run_autocompress(config, resume=None, stop_after=None):
    """Full run. ``resume`` is a checkpoint or run directory to continue
    from; ``stop_after`` stops after that many rounds (simulating a kill)."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(config)
    start_round = 1
    if resume is not None:
        ck = load_checkpoint(latest_checkpoint(resume))
        report = RunReport.from_json(ck.metadata["report"])
        net = ck.network
        start_round = int(ck.metadata["round"]) + 1
        if report.aborted or ck.metadata.get("stage") == "final":
            log.info("resumed run had already finished")
            return RunResult(report, net if not report.aborted else None, net, out)
        log.info("resuming after round %d", start_round - 1)
    else:
        t0 = time.perf_counter()
        if config.pretrained:
            net = load_checkpoint(config.pretrained).network
            base_acc = evaluate_accuracy(net, data[2])
        else:
            net, base_acc = train_baseline(config, data)
        c = count_params(net)
        floor = config.acc_floor if config.acc_floor >= 0 else base_acc - config.floor_margin
        report = RunReport(base_acc, floor, c.conv_dense, count_flops(net).conv_dense)
        report.rows.append(RoundRecord(0, "baseline", config.objective, *rates(net, report), base_acc,
                                       time.perf_counter() - t0))
        save_checkpoint(net, None, _meta(report, "baseline", 0, config), out / "baseline.acmp")
        _write_report(report, out)

    done = start_round - 1
    stopped = any(n.startswith("stopped") for n in report.notes)
    for t in range(start_round, config.rounds + 1):
        if stopped or (stop_after is not None and done >= stop_after):
            break
        if config.budget_rate > 0 and compact_rate(net, report) >= config.budget_rate:
            break
        t0 = time.perf_counter()
        target = config.round_target(t)
        if config.budget_rate > 0:
            target = budget_target(net, report, config, target)
            if target < 1.1:
                report.notes.append(f"stopped: round {t} would overshoot the budget {config.budget_rate:g}x")
                stopped = True
                break
        sa_cfg = SAConfig(iterations=config.sa_iterations, objective=config.objective, scheme=config.scheme,
                          warmup=config.sa_warmup, t_stop_ratio=config.sa_t_stop_ratio,
                          seed=derive_seed(config.seed, f"sa-round-{t}"))
        eval_subset = data[1].head(config.eval_size)
        try:
            action, _ = sa_run(net, target, sa_cfg, eval_subset)
        except InfeasibleError as exc:
            report.notes.append(f"round {t}: target {target:g} infeasible ({exc}); halving")
            target /= 2.0
            try:
                if target <= 1.0:
                    raise InfeasibleError(f"halved target {target:g} is not above 1")
                action, _ = sa_run(net, target, sa_cfg, eval_subset)
            except InfeasibleError as exc2:
                msg = f"round {t}: no feasible action after halving the target ({exc2})"
                if t == 1:
                    report.aborted = msg
                else:
                    report.notes.append("stopped: " + msg)
                break
        acc_before = evaluate_accuracy(net, data[2])
        admm_cfg = admm_config(config, t)
        admm_net, state, _ = admm_regularize(net, action, data[0], admm_cfg)
        pruned, acc = hard_prune_retrain(admm_net, state, data[0], data[2], admm_cfg)
        if config.purify_per_round:
            pruned, _ = phase_two(pruned, config, data, f"round-{t}", report)
            acc = evaluate_accuracy(pruned, data[2])
        record = RoundRecord(t, "phase1", config.objective, *rates(pruned, report), acc,
                             time.perf_counter() - t0, action.digest(), acc_before, target)
        if acc < report.floor:
            if t == 1:
                report.rows.append(record)
                report.aborted = (f"round 1 accuracy {acc:.4f} is below the floor {report.floor:.4f}; "
                                  "nothing to keep")
                net = pruned
            else:
                report.notes.append(f"stopped: round {t} accuracy {acc:.4f} fell below the floor "
                                    f"{report.floor:.4f} (params rate {record.params_rate:.2f}x); kept round {t - 1}")
            save_checkpoint(net, None, _meta(report, "phase1", t - 1 if t > 1 else 1, config),
                            out / f"round-{max(t - 1, 1)}.acmp")
            _write_report(report, out)
            break
        net = pruned
        report.rows.append(record)
        done = t
        save_checkpoint(net, None, _meta(report, "phase1", t, config), out / f"round-{t}.acmp")
        _write_report(report, out)
        log.info("round %d: params %.2fx flops %.2fx accuracy %.4f", t, record.params_rate, record.flops_rate, acc)

    if report.aborted:
        _write_report(report, out)
        return RunResult(report, None, net, out)
    if stop_after is not None and done >= stop_after and done < config.rounds and not stopped:
        return RunResult(report, None, net, out)

    t0 = time.perf_counter()
    last = report.rows[-1].round
    if config.purify and not config.purify_per_round:
        masked, _ = phase_two(net, config, data, "final", report)
    else:
        masked = propagate_masks(net)
    final = shrink_network(masked)
    acc = evaluate_accuracy(final, data[2])
    report.rows.append(RoundRecord(last, "phase2", config.objective, *rates(final, report), acc,
                                   time.perf_counter() - t0))
    save_checkpoint(final, None, _meta(report, "final", last, config), out / "final.acmp")
    _write_report(report, out)
    return RunResult(report, final, masked, out)


def train_from_scratch(network, data, config, seed=None):
    """Re-initialise ``network``'s structure and train it with the baseline recipe."""
    seed = derive_seed(config.seed, "scratch") if seed is None else seed
    net = reinitialize(network, seed)
    net, _ = train(net, data[0], config.epochs, lr=config.lr, batch=config.batch, seed=derive_seed(seed, "order"))
    return net, evaluate_accuracy(net, data[2])


def scratch_comparison(network, pruned_accuracy, data, config, report=None):
    """Scratch-train ``network``'s structure; returns (and records) both accuracies and the gap."""
    _, acc = train_from_scratch(network, data, config)
    result = {"pruned_accuracy": float(pruned_accuracy), "scratch_accuracy": float(acc),
              "gap": float(pruned_accuracy - acc)}
    if report is not None:
        report.scratch = result
        last = report.final()
        report.rows.append(RoundRecord(last.round if last else 0, "scratch", last.objective if last else "params",
                                       last.params_rate if last else 1.0, last.flops_rate if last else 1.0,
                                       acc, 0.0))
    return result
