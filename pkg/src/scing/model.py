"""Composition of the encoders, prompt bank and fusion modules."""

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_module
from .config import Config
from .encoders import ImageEncoder, TextEncoder, count_parameters
from .errors import CheckpointError
from .prompts import VOCAB, init_prompt_bank, template_ids
from .svip import SVIP, MetaNet, cocoop_fuse


class ScingModel(nn.Module):
    """Dual encoder with per-class prompts and an optional image-conditioned fusion path.

    ``fusion`` selects how image features reach the prompts: ``"none"``
    (static prompts), ``"metanet"`` (one shared offset on every token) or
    ``"svip"`` (gated per-token fusion on the first M tokens). All three
    submodules are always built so that every variant shares its
    initialisation for a given seed.
    """

    def __init__(self, config: Config, n_classes: int, seed: int | None = None):
        super().__init__()
        mc, pc, sc = config.model, config.prompts, config.svip
        seed = config.run.seed if seed is None else seed
        self.fusion = sc.fusion
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_encoder = ImageEncoder(
                image_size=mc.image_size,
                patch_size=mc.patch_size,
                width=mc.width,
                depth=mc.depth,
                heads=mc.heads,
                embed_dim=mc.embed_dim,
                init_temperature=mc.init_temperature,
            )
            prefix_ids, suffix_ids = template_ids()
            context = len(prefix_ids) + pc.n_tokens + len(suffix_ids)
            self.text_encoder = TextEncoder(
                len(VOCAB), context, embed_dim=mc.embed_dim, depth=mc.text_depth, heads=mc.text_heads
            )
            with torch.no_grad():
                prefix = self.text_encoder.embed_tokens(prefix_ids)
                suffix = self.text_encoder.embed_tokens(suffix_ids)
            self.prompts = init_prompt_bank(
                n_classes, pc.n_tokens, pc.n_fused, mc.embed_dim, seed, prefix=prefix, suffix=suffix
            )
            hidden = sc.hidden_dim or None
            self.svip = SVIP(mc.width, mc.embed_dim, pc.n_fused, hidden, init_std=sc.init_std)
            self.meta_net = MetaNet(mc.width, mc.embed_dim, hidden, init_std=sc.init_std)

    @property
    def n_classes(self) -> int:
        return self.prompts.n_classes

    def prompt_sequences(self, labels, V=None, fusion=None) -> torch.Tensor:
        fusion = self.fusion if fusion is None else fusion
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if fusion == "none" or V is None:
            return self.prompts.sequences(labels)
        if fusion == "svip":
            head = self.prompts.tokens[labels, : self.prompts.n_fused]
            return self.prompts.sequences(labels, head=self.svip(head, V))
        if fusion == "metanet":
            return self.prompts.sequences(labels, tokens=cocoop_fuse(self.meta_net, self.prompts.tokens[labels], V))
        raise ValueError(f"unknown fusion {fusion!r}")

    def text_features(self, labels, V=None, fusion=None) -> torch.Tensor:
        """Unit-norm text embeddings for ``labels`` conditioned on image features ``V``."""
        return self.text_encoder(self.prompt_sequences(labels, V, fusion))

    def class_text_features(self) -> torch.Tensor:
        """``(K, d)`` embeddings from the raw prompts, condition path off."""
        return self.text_features(torch.arange(self.n_classes), None, "none")

    def svip_text_embedding(self, class_id: int, image) -> torch.Tensor:
        V, _ = self.image_encoder.encode_image(image)
        return self.text_features([class_id], V.unsqueeze(0), "svip")[0]

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.image_encoder.logit_scale.exp()

    def text_side_modules(self):
        return {"text_encoder": self.text_encoder, "prompts": self.prompts, "svip": self.svip,
                "meta_net": self.meta_net}

    def inference_parameter_count(self) -> int:
        return count_parameters(self.image_encoder)


def model_arrays(model: ScingModel) -> dict:
    """Named parameter arrays in checkpoint naming."""
    out = {}
    for k, v in model.image_encoder.state_dict().items():
        out[f"image.{k}"] = v
    for k, v in model.text_encoder.state_dict().items():
        out[f"text.{k}"] = v
    for k in range(model.n_classes):
        out[f"prompt.tokens.{k}"] = model.prompts.tokens[k]
    out["prompt.prefix"] = model.prompts.prefix
    out["prompt.suffix"] = model.prompts.suffix
    for k, v in model.svip.mlp.state_dict().items():
        out[f"svip.mlp.{k}"] = v
    out["svip.gate.W"] = model.svip.gate_W
    out["svip.gate.b"] = model.svip.gate_b
    for k, v in model.meta_net.net.state_dict().items():
        out[f"metanet.{k}"] = v
    return {k: v.detach().cpu().numpy().copy() for k, v in out.items()}


def prompt_meta(model: ScingModel) -> dict:
    return {"prompt.K": model.n_classes, "prompt.L": model.prompts.length, "prompt.M": model.prompts.n_fused}


def load_model_arrays(model: ScingModel, arrays: dict) -> None:
    def sub(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    load_module(model.image_encoder, sub("image."))
    load_module(model.text_encoder, sub("text."))
    load_module(model.svip.mlp, sub("svip.mlp."))
    load_module(model.meta_net.net, sub("metanet."))
    try:
        tokens = [arrays[f"prompt.tokens.{k}"] for k in range(model.n_classes)]
        extra = {
            "gate_W": arrays["svip.gate.W"],
            "gate_b": arrays["svip.gate.b"],
            "prefix": arrays["prompt.prefix"],
            "suffix": arrays["prompt.suffix"],
        }
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks field {exc.args[0]!r}") from None
    if f"prompt.tokens.{model.n_classes}" in arrays:
        raise CheckpointError("checkpoint has more prompt classes than the model")
    with torch.no_grad():
        stacked = torch.from_numpy(np.stack(tokens))
        if stacked.shape != model.prompts.tokens.shape:
            raise CheckpointError(
                f"field 'prompt.tokens': shape {tuple(stacked.shape)} != {tuple(model.prompts.tokens.shape)}"
            )
        model.prompts.tokens.copy_(stacked)
        for name, target in (("gate_W", model.svip.gate_W), ("gate_b", model.svip.gate_b),
                             ("prefix", model.prompts.prefix), ("suffix", model.prompts.suffix)):
            value = torch.from_numpy(np.ascontiguousarray(extra[name]))
            if value.shape != target.shape:
                raise CheckpointError(f"field {name!r}: shape {tuple(value.shape)} != {tuple(target.shape)}")
            target.copy_(value)
