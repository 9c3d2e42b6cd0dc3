"""Registration quality metrics and the initialization-strategy
comparison harness (model_seen / model_unseen / transfer / fine_tune /
ours, plus the not-deformed reference).

Report rows carry per-pair metrics; aggregate rows (pair_id "mean" and
"std_pop") are appended per (seed, arm). Std is the population standard
deviation (divide by n). Curves sample the fine-tuning arms every
`curve_every` epochs.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import warp_bilinear
from .loss import total_loss
from .model import init_params, forward
from .train import fine_tune, meta_train, pretrain, register_pair

ARM_NAMES = ("model_seen", "model_unseen", "transfer", "fine_tune", "ours")

TAG_INIT = 201
TAG_SPLIT = 202

REPORT_HEADER = "seed,arm,pair_id,landmark_dist_px,ncc,epe_px,folds"
CURVE_HEADER = "seed,arm,epoch,landmark_dist_px,ncc,loss"


@dataclass(frozen=True)
class ArmSpec:
    """One comparison arm and its training budgets.

    model_seen trains on the full target task (fine-tune and test pairs),
    model_unseen on the fine-tune split only, both for train_steps from a
    fresh initialization. transfer pretrains on the pooled source tasks.
    fine_tune continues transfer's parameters on the fine-tune split;
    ours inserts the meta stage between the two. finetune_epochs are the
    checkpoints reported (arm label "name@epoch").
    """
    name: str
    pretrain_steps: int = 2000
    meta_iterations: int = 1000
    finetune_epochs: tuple = (10, 200)
    train_steps: int = 2000

    def __post_init__(self):
        if self.name not in ARM_NAMES:
            raise ConfigError(f"unknown arm {self.name!r} (choices: {ARM_NAMES})")


def bilinear_at(img, xs, ys):
    """Sample img at subpixel (xs, ys), border-clamped."""
    h, w = img.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else xs.astype(np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else ys.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def landmark_distance(field, landmarks):
    """Mean distance between predicted and true moving-frame positions.

    Each fixed-frame landmark is mapped by the field interpolated at its
    (possibly subpixel) location; the prediction (fx + u, fy + v) is
    compared with the paired moving-frame point.
    """
    if len(landmarks) == 0:
        raise ConfigError("landmark set is empty")
    fx = landmarks.points[:, 2]
    fy = landmarks.points[:, 3]
    px = fx + bilinear_at(field[0], fx, fy)
    py = fy + bilinear_at(field[1], fx, fy)
    return float(np.mean(np.hypot(px - landmarks.points[:, 0],
                                  py - landmarks.points[:, 1])))


def global_ncc(a, b):
    """Pearson correlation over all pixels, in [-1, 1]; 0 if either image
    is constant."""
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0.0:
        return 0.0
    return float(np.sum(da * db) / denom)


def endpoint_error(field, field_gt):
    """Mean per-pixel Euclidean distance between displacement fields."""
    if field.shape != field_gt.shape:
        raise ShapeError(f"field shapes differ: {field.shape} vs {field_gt.shape}")
    return float(np.mean(np.hypot(field[0] - field_gt[0], field[1] - field_gt[1])))


def folding_count(field):
    """Interior pixels where the warp x -> x + field(x) has a non-positive
    forward-difference Jacobian determinant."""
    u, v = field[0], field[1]
    ux = u[:-1, 1:] - u[:-1, :-1]
    uy = u[1:, :-1] - u[:-1, :-1]
    vx = v[:-1, 1:] - v[:-1, :-1]
    vy = v[1:, :-1] - v[:-1, :-1]
    det = (1.0 + ux) * (1.0 + vy) - uy * vx
    return int(np.count_nonzero(det <= 0.0))


def _metric_row(field, sample):
    dist = landmark_distance(field, sample.landmarks) if sample.landmarks else float("nan")
    warped = warp_bilinear(np.asarray(sample.moving, dtype=field.dtype), field)
    ncc = global_ncc(warped, sample.fixed)
    epe = endpoint_error(field, sample.gt_field) if sample.gt_field is not None else float("nan")
    return dist, ncc, epe, folding_count(field)


def evaluate_params(params, samples):
    """Per-pair metric rows for a trained network."""
    rows = []
    for pid, s in enumerate(samples):
        field, _ = forward(params, s.moving, s.fixed)
        rows.append((pid,) + _metric_row(field, s))
    return rows


def evaluate_fields(fields, samples):
    """Per-pair metric rows for explicit displacement fields."""
    if len(fields) != len(samples):
        raise ConfigError(f"{len(fields)} fields for {len(samples)} samples")
    rows = []
    for pid, (field, s) in enumerate(zip(fields, samples)):
        if field.shape != (2,) + s.fixed.shape:
            raise ShapeError(f"field {pid} shape {field.shape} does not match images")
        rows.append((pid,) + _metric_row(field, s))
    return rows


def aggregate(rows):
    """(means, population stds) over the metric columns of per-pair rows."""
    cols = np.asarray([r[1:] for r in rows], dtype=np.float64)
    return cols.mean(axis=0), cols.std(axis=0)


def report_rows_for(seed, arm, pair_rows):
    """Flatten per-pair rows plus mean/std_pop aggregate rows."""
    out = [(seed, arm, str(pid), d, n, e, float(f)) for pid, d, n, e, f in pair_rows]
    mean, std = aggregate(pair_rows)
    out.append((seed, arm, "mean", *mean))
    out.append((seed, arm, "std_pop", *std))
    return out


def write_report_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(REPORT_HEADER + "\n")
        f.write("# std_pop rows are population standard deviations (divide by n)\n")
        for seed, arm, pid, d, n, e, folds in rows:
            f.write(f"{seed},{arm},{pid},{d:.9g},{n:.9g},{e:.9g},{folds:.9g}\n")


def write_curve_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CURVE_HEADER + "\n")
        for seed, arm, epoch, d, n, l in rows:
            f.write(f"{seed},{arm},{epoch},{d:.9g},{n:.9g},{l:.9g}\n")


def read_csv_rows(path):
    """Rows of a report/curve CSV as string lists, comments skipped."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split(","))
    return header, rows


def _derived_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _curve_arm(name, start_params, ft_task, test_samples, probe, cfg, arm, seed,
               report_rows, curve_rows):
    """Fine-tune with periodic evaluation; emits curve rows every 10 epochs
    (plus epoch 0) and report rows at the arm's checkpoint epochs."""
    max_ep = max(arm.finetune_epochs) if arm.finetune_epochs else 0

    def snap(epoch, params, train_loss):
        if epoch % 10 == 0 or epoch == max_ep or epoch == 0:
            rows = evaluate_params(params, test_samples)
            mean, _ = aggregate(rows)
            loss_val = train_loss if train_loss is not None else _probe_loss(params, probe, cfg)
            curve_rows.append((seed, name, epoch, mean[0], mean[1], loss_val))
        if epoch in arm.finetune_epochs:
            report_rows.extend(
                report_rows_for(seed, f"{name}@{epoch}", evaluate_params(params, test_samples)))

    snap(0, start_params, None)
    fine_tune(start_params, ft_task, max_ep, cfg, on_epoch=snap)


def _probe_loss(params, probe_samples, cfg):
    vals = []
    for s in probe_samples:
        field, _ = forward(params, s.moving, s.fixed)
        vals.append(total_loss(s.fixed, s.moving, field, cfg.loss)[0])
    return float(np.mean(vals))


def _run_seed(arms, source, target, seed, cfg, arch, split):
    report_rows, curve_rows = [], []
    cfg_s = replace(cfg, seed=_derived_seed(seed, cfg.seed))
    params0 = init_params(arch, _derived_seed(seed, TAG_INIT))

    perm = np.random.default_rng([seed, TAG_SPLIT]).permutation(target.n)
    n_ft = int(round(split * target.n))
    if n_ft < 1 or n_ft >= target.n:
        raise ConfigError(f"split {split} leaves an empty partition for {target.n} pairs")
    ft_task = target.subset(perm[:n_ft], "-ft")
    test_samples = [target.pair(int(i)) for i in perm[n_ft:]]
    probe = [ft_task.pair(i) for i in range(min(16, ft_task.n))]

    zero_rows = evaluate_fields(
        [np.zeros((2,) + s.fixed.shape) for s in test_samples], test_samples)
    report_rows.extend(report_rows_for(seed, "not_deformed", zero_rows))

    pretrain_memo = {}

    def pretrained(steps):
        if steps not in pretrain_memo:
            pretrain_memo[steps] = pretrain(source, cfg_s, params0, steps)
        return pretrain_memo[steps]

    for arm in arms:
        if arm.name == "model_seen":
            p = pretrain([target], cfg_s, params0, arm.train_steps)
            report_rows.extend(report_rows_for(seed, arm.name, evaluate_params(p, test_samples)))
        elif arm.name == "model_unseen":
            p = pretrain([ft_task], cfg_s, params0, arm.train_steps)
            report_rows.extend(report_rows_for(seed, arm.name, evaluate_params(p, test_samples)))
        elif arm.name == "transfer":
            p = pretrained(arm.pretrain_steps)
            report_rows.extend(report_rows_for(seed, arm.name, evaluate_params(p, test_samples)))
        elif arm.name == "fine_tune":
            _curve_arm("fine_tune", pretrained(arm.pretrain_steps), ft_task, test_samples,
                       probe, cfg_s, arm, seed, report_rows, curve_rows)
        elif arm.name == "ours":
            p_meta = meta_train(pretrained(arm.pretrain_steps), source, cfg_s,
                                iterations=arm.meta_iterations)
            _curve_arm("ours", p_meta, ft_task, test_samples, probe, cfg_s, arm, seed,
                       report_rows, curve_rows)
    return report_rows, curve_rows


def run_comparison(arms, source, target, seeds, cfg, arch, split=0.8, workers=1):
    """Runs every arm for every seed; returns (report_rows, curve_rows).

    The target task must not appear among the source tasks; its pairs are
    split 80/20 (by default) into fine-tune and test sets per seed.
    """
    if any(t.task_id == target.task_id for t in source):
        raise ConfigError(f"target task {target.task_id!r} also appears in source")
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(arms, source, target, s, cfg, arch, split) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_star, jobs))
    else:
        results = [_run_seed(*j) for j in jobs]
    report_rows, curve_rows = [], []
    for rep, cur in results:
        report_rows.extend(rep)
        curve_rows.extend(cur)
    return report_rows, curve_rows


def _run_seed_star(job):
    return _run_seed(*job)
