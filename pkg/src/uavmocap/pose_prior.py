"""Linear-Gaussian latent pose prior.

A fixed decoder with orthonormal columns maps a 32-d latent vector to a pose
offset around the identity pose; the encoder is the orthogonal projection
back. The latent has a standard normal prior, so the prior penalty is the
squared latent norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .body_model import IDENTITY_THETA, THETA_DIM
from .errors import ShapeMismatch

LATENT_DIM = 32
PRIOR_SEED = 20220323


@dataclass(frozen=True)
class PriorBasis:
    decoder: np.ndarray  # (126, 32), orthonormal columns
    seed: int = PRIOR_SEED

    def __post_init__(self):
        if np.shape(self.decoder) != (THETA_DIM, LATENT_DIM):
            raise ShapeMismatch(f"decoder must be {THETA_DIM}x{LATENT_DIM}")

    def to_dict(self):
        return {"latent_dim": LATENT_DIM, "seed": self.seed,
                "decoder": np.asarray(self.decoder).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["decoder"], dtype=float), int(d["seed"]))


def build_prior(seed: int = PRIOR_SEED) -> PriorBasis:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(THETA_DIM, LATENT_DIM)))
    q = q * np.sign(np.diag(r))[None, :]
    return PriorBasis(q, seed)


def decode(v, prior: PriorBasis) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != LATENT_DIM:
        raise ShapeMismatch(f"latent must have {LATENT_DIM} entries")
    return IDENTITY_THETA + v @ prior.decoder.T


def encode(theta, prior: PriorBasis) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != THETA_DIM:
        raise ShapeMismatch(f"theta must have {THETA_DIM} entries")
    return (theta - IDENTITY_THETA) @ prior.decoder


def prior_penalty(theta, prior: PriorBasis) -> float:
    """``||encode(theta)||^2``."""
    v = encode(theta, prior)
    return float(v @ v)


def prior_penalty_grad(theta, prior: PriorBasis) -> np.ndarray:
    return 2.0 * prior.decoder @ encode(theta, prior)


def decode_jnp(v, decoder):
    return jnp.asarray(IDENTITY_THETA) + v @ decoder.T


def encode_jnp(theta, decoder):
    return (theta - jnp.asarray(IDENTITY_THETA)) @ decoder
