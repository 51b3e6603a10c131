"""Shared training plumbing: optimizer schedule and per-iteration logs."""

from dataclasses import dataclass, field

from .ops import step_decay_lr


@dataclass
class OptimizerSchedule:
    """Plain SGD with a step-decay learning rate (lr0 / 10 after every
    ``decay_every`` iterations). ``momentum`` and ``weight_decay`` are
    reserved knobs and must stay 0."""

    lr0: float = 1e-4
    decay_every: int = 8000
    total_iters: int = 20000
    batch_size: int = 16
    patch_size: int = 48
    momentum: float = 0.0
    weight_decay: float = 0.0
    # After bn_freeze_frac of the iterations the denoiser's batch-norm
    # statistics are recalibrated at bn_recal_patch (0 = twice the training
    # patch) and pinned, so the deployed eval-mode function is what the
    # remaining iterations optimize. Set bn_freeze_frac=1 to disable.
    bn_freeze_frac: float = 0.5
    bn_recal_batches: int = 50
    bn_recal_patch: int = 0

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.decay_every <= 0 or self.total_iters <= 0:
            raise ValueError("decay_every and total_iters must be positive")
        if self.batch_size <= 0 or self.patch_size <= 0:
            raise ValueError("batch_size and patch_size must be positive")
        if self.momentum != 0.0 or self.weight_decay != 0.0:
            raise ValueError("momentum and weight_decay are reserved and must be 0")
        if not 0.0 <= self.bn_freeze_frac <= 1.0:
            raise ValueError("bn_freeze_frac must be in [0, 1]")
        if self.bn_recal_batches < 0 or self.bn_recal_patch < 0:
            raise ValueError("bn_recal_batches and bn_recal_patch must be >= 0")
        return self

    def lr_at(self, iteration):
        return step_decay_lr(self.lr0, iteration, self.decay_every)


@dataclass
class TrainingLog:
    """Per-iteration records: (iteration, loss, loss_d, loss_h, lr)."""

    entries: list = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")
    target_metric: float = float("nan")
    achieved_metric: float = float("nan")
    reached_target: bool = True

    def append(self, iteration, loss, loss_d=None, loss_h=None, lr=None):
        self.entries.append((iteration, loss, loss_d, loss_h, lr))

    def losses(self):
        return [e[1] for e in self.entries]

    def lines(self):
        out = []
        for it, loss, loss_d, loss_h, lr in self.entries:
            ld = "-" if loss_d is None else f"{loss_d:.8e}"
            lh = "-" if loss_h is None else f"{loss_h:.8e}"
            lrs = "-" if lr is None else f"{lr:.8e}"
            out.append(f"{it}\t{loss:.8e}\t{ld}\t{lh}\t{lrs}")
        return out

    def save(self, path):
        with open(path, "w") as f:
            f.write("# iteration\tloss\tloss_d\tloss_h\tlr\n")
            for line in self.lines():
                f.write(line + "\n")

    def smoothed_losses(self, window=50):
        vals = self.losses()
        out = []
        for i in range(0, len(vals) - window + 1, window):
            out.append(sum(vals[i:i + window]) / window)
        return out
