"""Toy-scale network: content/style encoders, weight head, anchor bank,
coarse-to-fine registration modules, and the two decoders.

Information flow: the image yields multilevel content features and a style
code; the bottom feature predicts a simplex weight vector; the weight fuses
the per-level anchor Gaussians into atlas posteriors; registration modules
turn (atlas statistics, warped features) into per-level velocity posteriors
whose flows compose into one diffeomorphism; the segmentation decoder reads
only atlas samples while the reconstruction decoder also gets the style
code, and both outputs are warped by the inverse map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffeo as D
from . import distributions as dist
from . import nn
from . import tensor as T
from .distributions import DiagonalGaussian
from .nn import LEAKY_SLOPE, Module
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    levels: int = 3
    anchors: int = 6
    classes: int = 3
    style_dim: int = 16
    enc_channels: tuple[int, ...] = (32, 16, 8)   # coarse to fine
    z_channels: tuple[int, ...] = (8, 4, 2)       # coarse to fine
    dec_channels: tuple[int, ...] = (12, 10, 8)   # coarse to fine
    reg_width: int = 6
    squaring_steps: int = 6

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.anchors < 2:
            raise ValueError("need at least two anchors")
        for name in ("enc_channels", "z_channels", "dec_channels"):
            val = tuple(getattr(self, name))
            setattr(self, name, val)
            if len(val) != self.levels:
                raise ValueError(f"{name} must list one width per level")
        if self.image_size % (2 ** (self.levels - 1)) != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{self.levels - 1}"
            )

    def level_size(self, l: int) -> int:
        """Spatial size of level l (1 = coarsest)."""
        return self.image_size // (2 ** (self.levels - l))


@dataclass
class ForwardBundle:
    features: list[Tensor]
    weights: Tensor                       # (N, M)
    atlas_posts: list[DiagonalGaussian]
    atlas_samples: list[Tensor]
    vel_posts: list[DiagonalGaussian]
    vel_fields: list[D.VelocityField]
    phi: D.DiffeoMap
    phi_inv: D.DiffeoMap
    style: Tensor                         # (N, S)
    seg_logits_raw: Tensor                # (N, K, H, W) before warping
    seg_logits: Tensor                    # (N, K, H, W) after phi_inv
    recon: Tensor                         # (N, 1, H, W)
    scale: Tensor                         # (N, 1, H, W), strictly positive

    @property
    def batch(self) -> int:
        return self.weights.shape[0]


def split_bundle(bundle: ForwardBundle, n_first: int) -> tuple[ForwardBundle, ForwardBundle]:
    """Splits a batched bundle into two along the batch axis.

    Every op here is per-sample, so one joint forward over the concatenated
    source and target batch is equivalent to two separate passes; splitting
    through sliced views keeps gradients flowing into the joint graph.
    """

    def halves(t: Tensor):
        return t[:n_first], t[n_first:]

    def split_gauss(q: DiagonalGaussian):
        ma, mb = halves(q.mean)
        la, lb = halves(q.logvar)
        return DiagonalGaussian(ma, la), DiagonalGaussian(mb, lb)

    feats = [halves(f) for f in bundle.features]
    posts = [split_gauss(q) for q in bundle.atlas_posts]
    samples = [halves(z) for z in bundle.atlas_samples]
    vposts = [split_gauss(q) for q in bundle.vel_posts]
    vfields = [halves(v.field) for v in bundle.vel_fields]
    wa, wb = halves(bundle.weights)
    pa, pb = halves(bundle.phi.coords)
    ia, ib = halves(bundle.phi_inv.coords)
    sa, sb = halves(bundle.style)
    lra, lrb = halves(bundle.seg_logits_raw)
    la, lb = halves(bundle.seg_logits)
    ra, rb = halves(bundle.recon)
    ca, cb = halves(bundle.scale)

    def mk(i):
        return ForwardBundle(
            features=[f[i] for f in feats],
            weights=(wa, wb)[i],
            atlas_posts=[p[i] for p in posts],
            atlas_samples=[s[i] for s in samples],
            vel_posts=[p[i] for p in vposts],
            vel_fields=[D.VelocityField(v[i]) for v in vfields],
            phi=D.DiffeoMap((pa, pb)[i]),
            phi_inv=D.DiffeoMap((ia, ib)[i]),
            style=(sa, sb)[i],
            seg_logits_raw=(lra, lrb)[i],
            seg_logits=(la, lb)[i],
            recon=(ra, rb)[i],
            scale=(ca, cb)[i],
        )

    return mk(0), mk(1)


class AnchorBank(Module):
    """M learnable diagonal Gaussians per level, independent of any input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.levels = cfg.levels
        for l in range(1, cfg.levels + 1):
            s = cfg.level_size(l)
            shape = (cfg.anchors, cfg.z_channels[l - 1], s, s)
            setattr(self, f"mean_{l}", Tensor(rng.normal(0.0, 0.1, shape), requires_grad=True))
            setattr(self, f"logvar_{l}", Tensor(np.zeros(shape), requires_grad=True))

    def level(self, l: int) -> DiagonalGaussian:
        return DiagonalGaussian(getattr(self, f"mean_{l}"), getattr(self, f"logvar_{l}"))

    def param_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for _, p in sorted(self.named_parameters().items()))


class ContentEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        ch = cfg.enc_channels
        L = cfg.levels
        self.stem = [
            nn.ConvBlock(1, ch[L - 1], rng),
            nn.ConvBlock(ch[L - 1], ch[L - 1], rng),
        ]
        downs = []
        refines = []
        for l in range(L - 1, 0, -1):  # finest-1 down to coarsest
            downs.append(nn.ConvBlock(ch[l], ch[l - 1], rng, stride=2))
            refines.append(nn.ConvBlock(ch[l - 1], ch[l - 1], rng))
        self.downs = downs
        self.refines = refines

    def __call__(self, x: Tensor) -> list[Tensor]:
        """Returns [c_1 ... c_L] ordered coarse to fine."""
        h = self.stem[1](self.stem[0](x))
        feats = [h]
        for down, refine in zip(self.downs, self.refines):
            h = refine(down(h))
            feats.append(h)
        return list(reversed(feats))


class StyleEncoder(Module):
    """Conv-LeakyReLU stages, spatial pooling, then a linear projection."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 8, stride=2, rng=rng)
        self.conv2 = nn.Conv2d(8, 16, stride=2, rng=rng)
        self.proj = nn.Linear(16, cfg.style_dim, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        h = T.leaky_relu(self.conv2(h), LEAKY_SLOPE)
        return self.proj(nn.global_average_pool(h))


class WeightHead(Module):
    """GAP of the coarsest feature, two-layer MLP, softmax onto the simplex."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        cin = cfg.enc_channels[0]
        self.fc1 = nn.Linear(cin, cin, rng=rng)
        self.fc2 = nn.Linear(cin, cfg.anchors, rng=rng)
        # spread fresh-model weights across the simplex: coincident weight
        # vectors sit in the flat/singular zone of the Fisher-Rao cost
        self.fc2.weight.data *= 4.0

    def __call__(self, c1: Tensor) -> Tensor:
        h = T.leaky_relu(self.fc1(nn.global_average_pool(c1)), LEAKY_SLOPE)
        return T.softmax(self.fc2(h), axis=-1)


class RegistrationModule(Module):
    """Four conv-norm-LeakyReLU blocks and a final conv producing the velocity
    posterior (two mean channels, two log-variance channels).

    The final conv starts at zero with log-variance bias -4 so initial flows
    are near-identity.
    """

    def __init__(self, cfg: ModelConfig, level: int, rng):
        super().__init__()
        cin = 2 * cfg.z_channels[level - 1] + cfg.enc_channels[level - 1]
        wdt = cfg.reg_width
        self.blocks = [
            nn.ConvBlock(cin, wdt, rng),
            nn.ConvBlock(wdt, wdt, rng),
            nn.ConvBlock(wdt, wdt, rng),
            nn.ConvBlock(wdt, wdt, rng),
        ]
        self.head = nn.Conv2d(wdt, 4, rng=rng, zero_init=True)
        # small nonzero mean bias keeps fresh-model flows off the exact
        # pixel-grid kinks of bilinear sampling; log-variance starts at -4
        # so initial deformations stay near identity
        self.head.bias.data[:2] = rng.uniform(-0.2, 0.2, 2)
        self.head.bias.data[2:] = -4.0

    def __call__(self, atlas_stats: Tensor, feat: Tensor) -> DiagonalGaussian:
        h = T.concat([atlas_stats, feat], axis=1)
        for blk in self.blocks:
            h = blk(h)
        out = self.head(h)
        return DiagonalGaussian(out[:, 0:2], out[:, 2:4])


class SegDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        zc, dc = cfg.z_channels, cfg.dec_channels
        blocks = [nn.ConvBlock(zc[0], dc[0], rng)]
        for l in range(1, cfg.levels):
            blocks.append(nn.ConvBlock(dc[l - 1] + zc[l], dc[l], rng))
        self.blocks = blocks
        self.head = nn.Conv2d(dc[-1], cfg.classes, rng=rng)
        self.sizes = [cfg.level_size(l) for l in range(1, cfg.levels + 1)]

    def __call__(self, zs: list[Tensor]) -> Tensor:
        h = self.blocks[0](zs[0])
        for l in range(1, len(zs)):
            s = self.sizes[l]
            h = D.resize_bilinear(h, (s, s))
            h = self.blocks[l](T.concat([h, zs[l]], axis=1))
        return self.head(h)


class ReconDecoder(Module):
    """Same skeleton as the segmentation decoder, but each level's feature map
    is modulated by a per-channel affine predicted from the style code, and
    the head emits the reconstruction plus a positive Laplacian scale map.
    """

    SCALE_FLOOR = 1e-4

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        zc, dc = cfg.z_channels, cfg.dec_channels
        # small but nonzero init keeps modulation near neutral while letting
        # gradients reach the style encoder from the first step
        def mod_linear(width):
            lin = nn.Linear(cfg.style_dim, 2 * width, rng=rng)
            lin.weight.data *= 0.1
            return lin

        blocks = [nn.ConvBlock(zc[0], dc[0], rng)]
        mods = [mod_linear(dc[0])]
        for l in range(1, cfg.levels):
            blocks.append(nn.ConvBlock(dc[l - 1] + zc[l], dc[l], rng))
            mods.append(mod_linear(dc[l]))
        self.blocks = blocks
        self.mods = mods
        self.head = nn.Conv2d(dc[-1], 2, rng=rng)
        self.sizes = [cfg.level_size(l) for l in range(1, cfg.levels + 1)]

    @staticmethod
    def _modulate(h: Tensor, affine: Tensor) -> Tensor:
        c = h.shape[1]
        return T.channel_affine(h, affine[:, :c] + 1.0, affine[:, c:])

    def __call__(self, zs: list[Tensor], style: Tensor) -> tuple[Tensor, Tensor]:
        h = self._modulate(self.blocks[0](zs[0]), self.mods[0](style))
        for l in range(1, len(zs)):
            s = self.sizes[l]
            h = D.resize_bilinear(h, (s, s))
            h = self._modulate(self.blocks[l](T.concat([h, zs[l]], axis=1)), self.mods[l](style))
        out = self.head(h)
        recon = out[:, 0:1]
        scale = T.softplus(out[:, 1:2]) + self.SCALE_FLOOR
        return recon, scale


class SegmentationModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, identity_phi: bool = False):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.identity_phi = identity_phi
        self.encoder = ContentEncoder(cfg, rng)
        self.style_encoder = StyleEncoder(cfg, rng)
        self.weight_head = WeightHead(cfg, rng)
        self.bank = AnchorBank(cfg, rng)
        self.reg_modules = [
            RegistrationModule(cfg, l, rng) for l in range(1, cfg.levels + 1)
        ]
        self.seg_decoder = SegDecoder(cfg, rng)
        self.recon_decoder = ReconDecoder(cfg, rng)

    # ---- stage operations -------------------------------------------------

    def encode_content(self, x: Tensor) -> list[Tensor]:
        x = self._ensure_batched(x)
        return self.encoder(x)

    def infer_weights(self, c1: Tensor) -> Tensor:
        return self.weight_head(c1)

    def infer_atlas(self, w, train: bool = False, rng=None):
        """Fuses the anchor bank with weights w, per level.

        Returns (posteriors, samples); samples are reparameterized draws in
        train mode and the posterior means in eval mode.
        """
        if not isinstance(w, Tensor):
            from .simplex import SimplexWeight
            if isinstance(w, SimplexWeight):
                w = Tensor(w.w)
            else:
                w = Tensor(np.asarray(w, dtype=np.float64))
        if w.ndim == 1:
            w = T.reshape(w, (1, w.shape[0]))
        posts = []
        samples = []
        for l in range(1, self.cfg.levels + 1):
            q = dist.poe_fuse(self.bank.level(l), w)
            posts.append(q)
            if train:
                samples.append(dist.sample(q, Tensor(rng.standard_normal(q.shape))))
            else:
                samples.append(q.mean)
        return posts, samples

    def infer_velocities(
        self, feats: list[Tensor], atlas_posts, train: bool = False, rng=None
    ):
        """Coarse-to-fine velocity inference and flow composition."""
        n = feats[0].shape[0]
        size = self.cfg.image_size
        if self.identity_phi:
            ident = np.broadcast_to(
                D.identity_grid(size, size), (n, 2, size, size)
            ).copy()
            phi = D.DiffeoMap(Tensor(ident))
            return [], [], phi, D.DiffeoMap(Tensor(ident.copy()))
        posts, fields = [], []
        phi_run = None
        for l in range(1, self.cfg.levels + 1):
            q_z = atlas_posts[l - 1]
            stats = T.concat([q_z.mean, q_z.clamped_logvar()], axis=1)
            feat = feats[l - 1]
            if phi_run is not None:
                s = self.cfg.level_size(l)
                feat = D.warp_image(feat, D.resize_map(phi_run, (s, s)))
            q_v = self.reg_modules[l - 1](stats, feat)
            if train:
                v = dist.sample(q_v, Tensor(rng.standard_normal(q_v.shape)))
            else:
                v = q_v.mean
            vf = D.VelocityField(v)
            phi_l = D.integrate(vf, self.cfg.squaring_steps)
            if phi_run is None:
                phi_run = phi_l
            else:
                phi_run = D.compose(D.resize_map(phi_run, phi_l.spatial), phi_l)
            posts.append(q_v)
            fields.append(vf)
        phi_inv = D.inverse(fields, self.cfg.squaring_steps)
        return posts, fields, phi_run, phi_inv

    def encode_style(self, x: Tensor) -> Tensor:
        return self.style_encoder(self._ensure_batched(x))

    def decode(self, atlas_samples: list[Tensor], style: Tensor, phi_inv: D.DiffeoMap):
        logits_raw = self.seg_decoder(atlas_samples)
        recon_raw, scale_raw = self.recon_decoder(atlas_samples, style)
        logits = D.warp_image(logits_raw, phi_inv)
        recon = D.warp_image(recon_raw, phi_inv)
        scale = D.warp_image(scale_raw, phi_inv)
        return logits_raw, logits, recon, scale

    def segment_from_weights(self, w) -> Tensor:
        """Eval-mode segmentation logits decoded straight from weights, no warp."""
        _, samples = self.infer_atlas(w, train=False)
        return self.seg_decoder(samples)

    # ---- full pass ---------------------------------------------------------

    def forward(self, x, train: bool = True, rng=None) -> ForwardBundle:
        if train and rng is None:
            raise ValueError("train-mode forward needs an RNG for sampling")
        x = self._ensure_batched(x)
        feats = self.encoder(x)
        w = self.infer_weights(feats[0])
        atlas_posts, atlas_samples = self.infer_atlas(w, train=train, rng=rng)
        vel_posts, vel_fields, phi, phi_inv = self.infer_velocities(
            feats, atlas_posts, train=train, rng=rng
        )
        style = self.style_encoder(x)
        logits_raw, logits, recon, scale = self.decode(atlas_samples, style, phi_inv)
        return ForwardBundle(
            features=feats,
            weights=w,
            atlas_posts=atlas_posts,
            atlas_samples=atlas_samples,
            vel_posts=vel_posts,
            vel_fields=vel_fields,
            phi=phi,
            phi_inv=phi_inv,
            style=style,
            seg_logits_raw=logits_raw,
            seg_logits=logits,
            recon=recon,
            scale=scale,
        )

    def _ensure_batched(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N,1,H,W) or (1,H,W) input, got {x.shape}")
        size = self.cfg.image_size
        if x.shape[-2:] != (size, size):
            raise ShapeError(f"input spatial size {x.shape[-2:]} != {(size, size)}")
        return x
