"""Run configuration: a flat, line-oriented UTF-8 file of
`section.key = value` entries with `#` comments, plus command-line
overrides. Unknown keys fail fast. Defaults follow the published
training recipe (window 9, lambda 1, learning rates 1e-4, batch of 3
tasks, 10 inner updates).
"""
from dataclasses import dataclass, field as dc_field

from .data import DomainSpec, TEXTURE_KINDS
from .errors import ConfigError
from .evaluate import ArmSpec
from .loss import LossConfig
from .model import ArchSpec
from .train import TaskSpec, TrainConfig


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_enc(s):
    levels = []
    for tok in s.split(","):
        tok = tok.strip().lower()
        if "s" not in tok:
            raise ConfigError(f"encoder level {tok!r} must look like '32s2'")
        ch, st = tok.split("s", 1)
        levels.append((int(ch), int(st)))
    return tuple(levels)


def _int_list(s):
    return tuple(int(t) for t in s.split(",") if t.strip())


def _str_list(s):
    return tuple(t.strip() for t in s.split(",") if t.strip())


# key -> (converter, default)
SCHEMA = {
    "arch.enc": (_parse_enc, ((16, 1), (32, 2), (32, 2), (32, 2))),
    "arch.dec": (_int_list, (32, 32, 16)),
    "arch.leaky_slope": (float, 0.2),
    "arch.final_zero_init": (_parse_bool, True),
    "train.inner_lr": (float, 1e-4),
    "train.meta_lr": (float, 1e-4),
    "train.meta_batch": (int, 3),
    "train.inner_steps": (int, 10),
    "train.pretrain_steps": (int, 2000),
    "train.meta_iterations": (int, 1000),
    "train.finetune_epochs": (int, 10),
    "train.seed": (int, 0),
    "train.fresh_pair_per_update": (_parse_bool, True),
    "train.outer_adam": (_parse_bool, False),
    "train.pretrain_early_stop": (_parse_bool, True),
    "loss.window": (int, 9),
    "loss.lambda": (float, 1.0),
    "loss.epsilon": (float, 1e-5),
    "data.size": (int, 64),
    "data.source_kinds": (_str_list, ("blobs", "checker", "ridges")),
    "data.target_kind": (str, "curves"),
    "data.pairs_per_task": (int, 60),
    "data.landmarks": (int, 25),
    "data.warp_amplitude": (float, 6.0),
    "data.warp_sigma": (float, 8.0),
    "data.noise_sigma": (float, 0.02),
    "data.density": (float, 1.0),
    "data.thickness": (float, 1.6),
    "data.frequency": (float, 1.0),
    "data.task_dir": (str, ""),
    "compare.arms": (_str_list, ("transfer", "fine_tune", "ours")),
    "compare.seeds": (_int_list, (0, 1, 2, 3, 4)),
    "compare.report_epochs": (_int_list, (10, 200)),
    "compare.split": (float, 0.8),
    "compare.seen_steps": (int, 2000),
}


def parse_assignments(lines, source="<config>"):
    """`key = value` pairs from config-file lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve(assignments):
    """Typed key/value map with defaults filled in; unknown keys raise."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, raw in assignments.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})")
    return values


@dataclass
class RunConfig:
    values: dict = dc_field(default_factory=lambda: resolve({}))

    @classmethod
    def load(cls, path=None, overrides=()):
        assignments = {}
        if path is not None:
            with open(path, "r", encoding="utf-8") as f:
                assignments.update(parse_assignments(f.readlines(), source=str(path)))
        assignments.update(parse_assignments(list(overrides), source="<override>"))
        return cls(values=resolve(assignments))

    def __getitem__(self, key):
        return self.values[key]

    @property
    def arch(self):
        return ArchSpec(enc=self["arch.enc"], dec=self["arch.dec"],
                        leaky_slope=self["arch.leaky_slope"],
                        final_zero_init=self["arch.final_zero_init"])

    @property
    def loss(self):
        return LossConfig(window=self["loss.window"], smooth_weight=self["loss.lambda"],
                          eps=self["loss.epsilon"])

    @property
    def train(self):
        return TrainConfig(
            inner_lr=self["train.inner_lr"], meta_lr=self["train.meta_lr"],
            meta_batch=self["train.meta_batch"], inner_steps=self["train.inner_steps"],
            pretrain_steps=self["train.pretrain_steps"],
            meta_iterations=self["train.meta_iterations"],
            finetune_epochs=self["train.finetune_epochs"], seed=self["train.seed"],
            loss=self.loss, fresh_pair_per_update=self["train.fresh_pair_per_update"],
            outer_adam=self["train.outer_adam"],
            pretrain_early_stop=self["train.pretrain_early_stop"])

    def domain(self, kind):
        size = self["data.size"]
        return DomainSpec(texture_kind=kind, density=self["data.density"],
                          thickness=self["data.thickness"], frequency=self["data.frequency"],
                          warp_sigma=self["data.warp_sigma"],
                          warp_amplitude=self["data.warp_amplitude"],
                          noise_sigma=self["data.noise_sigma"], size=(size, size))

    def _synthetic_task(self, kind, index):
        return TaskSpec(task_id=kind, domain=self.domain(kind),
                        seed=self["train.seed"] * 1000 + index,
                        n_pairs=self["data.pairs_per_task"],
                        n_landmarks=self["data.landmarks"])

    def source_tasks(self):
        if self["data.task_dir"]:
            import os

            root = self["data.task_dir"]
            target = self["data.target_kind"]
            names = sorted(d for d in os.listdir(root)
                           if os.path.isdir(os.path.join(root, d)) and d != target)
            if not names:
                raise ConfigError(f"no task directories under {root!r}")
            return [TaskSpec(task_id=n, directory=os.path.join(root, n)) for n in names]
        kinds = self["data.source_kinds"]
        for k in kinds:
            if k not in TEXTURE_KINDS:
                raise ConfigError(f"unknown texture kind {k!r}")
        return [self._synthetic_task(kind, i) for i, kind in enumerate(kinds)]

    def target_task(self):
        kind = self["data.target_kind"]
        if self["data.task_dir"]:
            import os

            path = os.path.join(self["data.task_dir"], kind)
            if not os.path.isdir(path):
                raise ConfigError(f"target task directory {path!r} not found")
            return TaskSpec(task_id=kind, directory=path)
        if kind not in TEXTURE_KINDS:
            raise ConfigError(f"unknown texture kind {kind!r}")
        return self._synthetic_task(kind, len(self["data.source_kinds"]))

    def arms(self):
        out = []
        for name in self["compare.arms"]:
            out.append(ArmSpec(
                name=name, pretrain_steps=self["train.pretrain_steps"],
                meta_iterations=self["train.meta_iterations"],
                finetune_epochs=self["compare.report_epochs"],
                train_steps=self["compare.seen_steps"]))
        return out
