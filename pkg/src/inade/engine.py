"""Training loop, inference modes, and checkpointing.

Training follows a two-timescale hinge-GAN recipe: one discriminator
update then one generator+encoder update per step, with the
discriminator learning rate four times the generator's and both decaying
linearly to zero after the configured epoch.  During training the noise
bank is remapped from the ground-truth image, which couples the bank to
instance appearance; at test time the three sampling modes draw the bank
from the prior, remap it from a reference, or mix the two per instance.

Checkpoints are single-file ZIP archives holding one .npy member per
named tensor (the .npy header records dtype, byte order, and shape) plus
a meta.json member with the config snapshot and the structure tree; the
exact layout is documented in the README.  A checkpoint restores models,
optimizer state, batch-norm statistics, and the training RNG, so a
resumed run reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import NoiseBank, sample_noise_bank, sample_replacement_rows
from .data import Batch, Sample, collate
from .errors import (
    ConfigInvalid,
    CorruptFile,
    EpochOutOfRange,
    LabelOutOfRange,
    NonFiniteLoss,
    PairMismatch,
    SchemaMismatch,
)
from .labels import LabelPair
from .losses import (
    ConvPyramidExtractor,
    LossWeights,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    perceptual_loss,
    total_generator_objective,
)
from .networks import (
    Generator,
    ModelConfig,
    MultiScaleDiscriminator,
    build_default_models,
    conditioning_planes,
    discriminator_input,
    generator_forward,
)
from .remap import (
    PerturbationSet,
    RemappingEncoder,
    build_perturbation_set,
    kl_loss,
    remap_noise,
)
from .rng import derived_seed, torch_generator

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters plus the model configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    epochs: int = 200
    decay_start: int = 100
    batch_size: int = 8
    seed: int = 0
    extractor_seed: int = 1234

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigInvalid("learning rates must be positive")
        if not 1 <= self.decay_start <= self.epochs:
            raise ConfigInvalid(
                f"decay_start must lie in [1, epochs], got {self.decay_start} of {self.epochs}")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be positive")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    """Learning rates at a 1-based epoch: flat, then linear decay to zero."""
    if not 1 <= epoch <= cfg.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.decay_start:
        factor = 1.0
    else:
        factor = (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)
    return cfg.lr_g * factor, cfg.lr_d * factor


@dataclass
class TrainState:
    """Everything a training run needs to continue from where it stopped."""

    config: TrainConfig
    generator: Generator
    discriminator: MultiScaleDiscriminator
    encoder: RemappingEncoder
    extractor: ConvPyramidExtractor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    """Build freshly-initialized models and optimizers for a config."""
    torch.manual_seed(derived_seed(cfg.seed, 0))
    gen, disc, enc, _ = build_default_models(cfg.model)
    extractor = ConvPyramidExtractor(seed=cfg.extractor_seed)
    opt_g = torch.optim.Adam(
        list(gen.parameters()) + list(enc.parameters()),
        lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d,
                             betas=(cfg.adam_beta1, cfg.adam_beta2))
    return TrainState(config=cfg, generator=gen, discriminator=disc, encoder=enc,
                      extractor=extractor, opt_g=opt_g, opt_d=opt_d,
                      rng=torch_generator(cfg.seed, 1))


def _logits(scale_features: Sequence[Sequence[torch.Tensor]]) -> list[torch.Tensor]:
    return [feats[-1] for feats in scale_features]


def _encode_batch(state: TrainState, batch: Batch) -> list[PerturbationSet]:
    maps_list = state.encoder.forward_batch(batch.images, batch.pairs)
    return [build_perturbation_set(maps, pair.inst.grid)
            for maps, pair in zip(maps_list, batch.pairs)]


def train_step(state: TrainState, batch: Batch) -> dict:
    """One discriminator update followed by one generator+encoder update.

    The reference for noise remapping is the ground-truth image of each
    batch element.  Raises NonFiniteLoss (with the offending values) if
    any objective stops being finite.
    """
    cfg = state.config
    state.generator.train()
    state.discriminator.train()
    state.encoder.train()

    banks = batch.sample_banks(cfg.model.noise_channels, state.rng)
    z = torch.randn(len(batch), cfg.model.latent_channels, generator=state.rng)
    perturbations = _encode_batch(state, batch)
    remapped = [remap_noise(bank, ps) for bank, ps in zip(banks, perturbations)]
    fake = state.generator(batch.pairs, remapped, z)

    cond = conditioning_planes(batch.pairs, dtype=batch.images.dtype)
    real_in = discriminator_input(batch.images, batch.pairs, cond)
    d_real = state.discriminator(real_in)
    d_fake = state.discriminator(discriminator_input(fake.detach(), batch.pairs, cond))
    loss_d = hinge_d_loss(_logits(d_real), _logits(d_fake))
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()

    with torch.no_grad():
        d_real_ref = state.discriminator(real_in)
    d_fake_g = state.discriminator(discriminator_input(fake, batch.pairs, cond))
    loss_adv = hinge_g_loss(_logits(d_fake_g))
    loss_fm = feature_matching_loss(d_real_ref, d_fake_g, cfg.loss.fm_start)
    loss_perc = perceptual_loss(state.extractor, batch.images, fake, cfg.loss.perc_start)
    loss_kl = torch.stack([kl_loss(ps) for ps in perturbations]).mean()
    loss_g = total_generator_objective(loss_adv, loss_fm, loss_perc, loss_kl, cfg.loss)
    state.opt_g.zero_grad()
    loss_g.backward()
    state.opt_g.step()

    losses = {
        "loss_d": float(loss_d.detach()),
        "loss_g_adv": float(loss_adv.detach()),
        "loss_fm": float(loss_fm.detach()),
        "loss_perc": float(loss_perc.detach()),
        "loss_kl": float(loss_kl.detach()),
        "loss_g_total": float(loss_g.detach()),
    }
    bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
    if bad:
        raise NonFiniteLoss(f"non-finite losses at step {state.step}: {bad}")
    state.step += 1
    return losses


def epoch_of_step(cfg: TrainConfig, step: int, dataset_size: int) -> int:
    """1-based epoch index a given step falls into, capped at the last epoch."""
    if dataset_size < 1:
        return 1
    return min(cfg.epochs, 1 + (step * cfg.batch_size) // dataset_size)


def _apply_lr(state: TrainState, epoch: int):
    lr_g, lr_d = lr_at_epoch(state.config, epoch)
    for group in state.opt_g.param_groups:
        group["lr"] = lr_g
    for group in state.opt_d.param_groups:
        group["lr"] = lr_d


def train_loop(state: TrainState, dataset, max_steps: int,
               hook: Optional[Callable[[dict], bool]] = None,
               log_file: Optional[Path] = None) -> list[dict]:
    """Run training steps with i.i.d. minibatch sampling.

    Batches are drawn with replacement from the training RNG, so a
    checkpointed run resumes on exactly the batches the uninterrupted run
    would have seen.  ``hook`` receives each step record and may return
    True to stop early.  Records are appended to ``log_file`` as
    line-delimited JSON when given.
    """
    history = []
    handle = open(log_file, "a") if log_file else None
    try:
        while state.step < max_steps:
            epoch = epoch_of_step(state.config, state.step, len(dataset))
            _apply_lr(state, epoch)
            idx = torch.randint(len(dataset), (state.config.batch_size,),
                                generator=state.rng)
            batch = collate([dataset[int(i)] for i in idx])
            losses = train_step(state, batch)
            lr_g, lr_d = lr_at_epoch(state.config, epoch)
            record = {"step": state.step, "epoch": epoch,
                      "lr_g": lr_g, "lr_d": lr_d, **losses}
            history.append(record)
            if handle:
                handle.write(json.dumps(record) + "\n")
            if hook and hook(record):
                break
    finally:
        if handle:
            handle.close()
    return history


def _prior_draws(pair: LabelPair, gen: Generator, seed: int):
    """The documented test-time draw order: z first, then the bank."""
    g = torch_generator(seed)
    z = torch.randn(gen.cfg.latent_channels, generator=g)
    bank = sample_noise_bank(pair.num_instances, gen.cfg.noise_channels, g, seed=seed)
    return z, bank


def sample_prior(gen: Generator, pair: LabelPair, seed: int) -> torch.Tensor:
    """Random-style synthesis from fresh prior noise."""
    z, bank = _prior_draws(pair, gen, seed)
    gen.eval()
    with torch.no_grad():
        return generator_forward(gen, pair, bank, z)


def _reference_perturbations(enc: RemappingEncoder, pair: LabelPair,
                             reference: Sample) -> PerturbationSet:
    if not reference.pair.same_layout(pair):
        raise PairMismatch("reference label pair must match the target pair")
    enc.eval()
    with torch.no_grad():
        maps = enc(torch.as_tensor(reference.image, dtype=torch.float32), pair)
        return build_perturbation_set(maps, pair.inst.grid)


def sample_reference(gen: Generator, enc: RemappingEncoder, pair: LabelPair,
                     reference: Sample, seed: int) -> torch.Tensor:
    """Style-guided synthesis: the bank is remapped from the reference image."""
    z, bank = _prior_draws(pair, gen, seed)
    ps = _reference_perturbations(enc, pair, reference)
    gen.eval()
    with torch.no_grad():
        return generator_forward(gen, pair, remap_noise(bank, ps), z)


def sample_mixed(gen: Generator, enc: RemappingEncoder, pair: LabelPair,
                 reference: Sample, guided_instances, seed: int) -> torch.Tensor:
    """Reference-guided noise for the chosen instances, prior noise elsewhere."""
    guided = sorted(set(int(l) for l in guided_instances))
    if guided and (guided[0] < 1 or guided[-1] > pair.num_instances):
        raise LabelOutOfRange(
            f"guided instances {guided} outside [1, {pair.num_instances}]")
    z, bank = _prior_draws(pair, gen, seed)
    if guided:
        ps = _reference_perturbations(enc, pair, reference)
        remapped = remap_noise(bank, ps)
        bank = bank.with_rows(guided,
                              remapped.n_gamma[[l - 1 for l in guided]],
                              remapped.n_beta[[l - 1 for l in guided]])
    gen.eval()
    with torch.no_grad():
        return generator_forward(gen, pair, bank, z)


def resample_instance(gen: Generator, pair: LabelPair, base_seed: int,
                      instance: int, row_seed: int) -> torch.Tensor:
    """Redraw one instance's bank rows; everything else stays fixed."""
    if not 1 <= instance <= pair.num_instances:
        raise LabelOutOfRange(f"instance {instance} outside [1, {pair.num_instances}]")
    z, bank = _prior_draws(pair, gen, base_seed)
    rows_g, rows_b = sample_replacement_rows(
        1, gen.cfg.noise_channels, torch_generator(row_seed))
    bank = bank.with_rows([instance], rows_g, rows_b)
    gen.eval()
    with torch.no_grad():
        return generator_forward(gen, pair, bank, z)


class GeneratorSampler:
    """Adapter exposing a generator through the metrics model protocol."""

    def __init__(self, gen: Generator):
        self.gen = gen
        self.noise_channels = gen.cfg.noise_channels
        self.latent_channels = gen.cfg.latent_channels

    def synthesize(self, pair: LabelPair, bank: NoiseBank, z: torch.Tensor) -> torch.Tensor:
        self.gen.eval()
        with torch.no_grad():
            return generator_forward(self.gen, pair, bank, z)


# --- checkpoint serialization -------------------------------------------------

def _encode(obj, tensors: dict, path: list):
    """Turn a nested state structure into a JSON tree plus named tensors."""
    if torch.is_tensor(obj):
        name = "/".join(path)
        tensors[name] = obj.detach().cpu()
        return {"__tensor__": name}
    if isinstance(obj, dict):
        items = []
        for key, value in obj.items():
            kind = "int" if isinstance(key, int) else "str"
            items.append([kind, str(key), _encode(value, tensors, path + [str(key)])])
        return {"__map__": items}
    if isinstance(obj, (list, tuple)):
        encoded = [_encode(v, tensors, path + [str(i)]) for i, v in enumerate(obj)]
        return {"__seq__": "tuple" if isinstance(obj, tuple) else "list",
                "items": encoded}
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise ConfigInvalid(f"cannot serialize object of type {type(obj).__name__}")


def _decode(node, tensors: dict):
    if isinstance(node, dict):
        if "__tensor__" in node:
            return torch.from_numpy(tensors[node["__tensor__"]].copy())
        if "__map__" in node:
            out = {}
            for kind, key, value in node["__map__"]:
                out[int(key) if kind == "int" else key] = _decode(value, tensors)
            return out
        if "__seq__" in node:
            items = [_decode(v, tensors) for v in node["items"]]
            return tuple(items) if node["__seq__"] == "tuple" else items
    return node


def _config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(data: dict) -> TrainConfig:
    try:
        model = dict(data["model"])
        model["encoder_widths"] = tuple(model["encoder_widths"])
        loss = dict(data["loss"])
        rest = {k: v for k, v in data.items() if k not in ("model", "loss")}
        return TrainConfig(model=ModelConfig(**model), loss=LossWeights(**loss), **rest)
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"config snapshot malformed: {exc}") from exc


def save_checkpoint(state: TrainState, path: Path):
    """Write the single-file checkpoint archive (see module docstring)."""
    tensors: dict[str, torch.Tensor] = {}
    tree = {
        "generator": _encode(state.generator.state_dict(), tensors, ["generator"]),
        "discriminator": _encode(state.discriminator.state_dict(), tensors, ["discriminator"]),
        "encoder": _encode(state.encoder.state_dict(), tensors, ["encoder"]),
        "extractor": _encode(state.extractor.state_dict(), tensors, ["extractor"]),
        "opt_g": _encode(state.opt_g.state_dict(), tensors, ["opt_g"]),
        "opt_d": _encode(state.opt_d.state_dict(), tensors, ["opt_d"]),
        "rng": _encode(state.rng.get_state(), tensors, ["rng"]),
    }
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "config": _config_to_dict(state.config),
        "tree": tree,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        archive.writestr("meta.json", json.dumps(meta))
        for name, tensor in tensors.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(tensor.numpy()),
                                      allow_pickle=False)
            archive.writestr(f"tensors/{name}.npy", buf.getvalue())


def load_checkpoint(path: Path) -> TrainState:
    """Rebuild a full training state from a checkpoint archive."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as archive:
            meta = json.loads(archive.read("meta.json"))
            tensors = {}
            for member in archive.namelist():
                if member.startswith("tensors/") and member.endswith(".npy"):
                    data = archive.read(member)
                    tensors[member[len("tensors/"):-len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(data), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, OSError, ValueError) as exc:
        raise CorruptFile(f"unreadable checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise SchemaMismatch(
            f"checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    cfg = _config_from_dict(meta["config"])
    state = init_state(cfg)
    tree = meta["tree"]
    try:
        state.generator.load_state_dict(_decode(tree["generator"], tensors))
        state.discriminator.load_state_dict(_decode(tree["discriminator"], tensors))
        state.encoder.load_state_dict(_decode(tree["encoder"], tensors))
        state.extractor.load_state_dict(_decode(tree["extractor"], tensors))
        state.opt_g.load_state_dict(_decode(tree["opt_g"], tensors))
        state.opt_d.load_state_dict(_decode(tree["opt_d"], tensors))
        state.rng.set_state(_decode(tree["rng"], tensors))
    except (KeyError, RuntimeError) as exc:
        raise SchemaMismatch(f"checkpoint tensors do not fit the config: {exc}") from exc
    state.step = int(meta["step"])
    return state
