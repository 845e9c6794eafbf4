"""Frozen feature extractors for the perceptual loss, and the cached VGG19 weight download."""
import abc
import hashlib
import logging
import os
import traceback
from pathlib import Path
from typing import List, Optional, Sequence, Union

import requests
import torch
from torch import nn

from vsadapt.errors import ArgumentError, CheckpointError

logger = logging.getLogger("vsadapt.features")

# relu1_2, relu2_2, relu3_4, relu4_4 in torchvision's vgg19().features
VGG19_LAYERS = (3, 8, 17, 26)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DOWNLOAD_TIMEOUT = 60


class FeatureExtractor(nn.Module, abc.ABC):
    """Fixed (non-trainable) network returning a list of activation maps for 3-channel inputs in [-1, 1]."""

    @abc.abstractmethod
    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        ...

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.features(x)

    def _freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


class RandomConvFeatures(FeatureExtractor):
    """
    Multi-scale stack of random convolutions whose weights are drawn from `seed`, so two instances with the
    same seed and widths are identical. Used where pretrained weights are unavailable.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (8, 16, 32), in_channels: int = 3):
        super().__init__()
        self.seed = seed
        self.widths = tuple(widths)
        generator = torch.Generator().manual_seed(seed)
        blocks = []
        channels = in_channels
        for i, width in enumerate(self.widths):
            conv = nn.Conv2d(channels, width, kernel_size=3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) / fan_in ** 0.5)
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            channels = width
        self.blocks = nn.ModuleList(blocks)
        self._freeze()

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)
        return outputs


class VGGFeatures(FeatureExtractor):
    """Activations of a pretrained VGG19 at `layers`; inputs are mapped from [-1, 1] to ImageNet statistics."""

    def __init__(self, weights_path: Union[str, os.PathLike], layers: Sequence[int] = VGG19_LAYERS):
        super().__init__()
        from torchvision.models import vgg19

        self.layers = tuple(layers)
        model = vgg19(weights=None)
        try:
            state = torch.load(weights_path, map_location='cpu', weights_only=True)
            model.load_state_dict(state)
        except Exception as e:
            logger.error(f'Could not load VGG19 weights from {weights_path}: ' + traceback.format_exc())
            raise CheckpointError(f'cannot load VGG19 weights from {weights_path}: {e}') from e
        self.body = model.features[:max(self.layers) + 1]
        self.register_buffer('mean', torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self._freeze()

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = ((x + 1.0) / 2.0 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        outputs = []
        for index, layer in enumerate(self.body):
            x = layer(x)
            if index in self.layers:
                outputs.append(x)
        return outputs


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Mean over layers of the mean squared difference between activations."""
    fa = extractor(a)
    fb = extractor(b)
    return torch.stack([torch.mean((x - y) ** 2) for x, y in zip(fa, fb)]).mean()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_weights(url: str, dest: Union[str, os.PathLike], sha256: Optional[str] = None) -> Path:
    """
    Download `url` to `dest` unless a file with the expected checksum is already there.
    Written to a temporary file first; a checksum mismatch deletes the download and raises.
    """
    dest = Path(dest)
    logger.info(f'fetch_weights({url} -> {dest})')
    if dest.exists() and (sha256 is None or _sha256(dest) == sha256):
        logger.debug(f'using cached weights at {dest}')
        return dest

    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_name(dest.name + '.part')
    try:
        with requests.get(url, stream=True, timeout=DOWNLOAD_TIMEOUT) as resp:
            resp.raise_for_status()
            with open(tmp, 'wb') as f:
                for chunk in resp.iter_content(chunk_size=1 << 20):
                    f.write(chunk)
    except requests.RequestException as e:
        logger.error(f'Download of {url} failed: ' + traceback.format_exc())
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f'could not download weights from {url}: {e}') from e

    if sha256 is not None:
        actual = _sha256(tmp)
        if actual != sha256:
            tmp.unlink(missing_ok=True)
            raise CheckpointError(f'checksum mismatch for {url}: expected {sha256}, got {actual}')
    os.replace(tmp, dest)
    return dest


def build_feature_extractor(provider: str, seed: int = 0, weights_path: Optional[str] = None,
                            weights_url: Optional[str] = None, weights_sha256: Optional[str] = None,
                            cache_dir: Union[str, os.PathLike] = 'models/cache') -> FeatureExtractor:
    """
    :param provider: "random" (seeded random conv stack) or "vgg19" (pretrained weights from
        `weights_path`, or downloaded from `weights_url` into `cache_dir`)
    """
    logger.info(f'build_feature_extractor({provider})')
    if provider == 'random':
        return RandomConvFeatures(seed=seed)
    if provider == 'vgg19':
        if weights_path is None:
            if weights_url is None:
                raise ArgumentError('vgg19 perceptual features need weights_path or weights_url')
            weights_path = str(fetch_weights(weights_url, Path(cache_dir) / Path(weights_url).name, weights_sha256))
        return VGGFeatures(weights_path)
    raise ArgumentError(f'unknown perceptual provider {provider!r}, expected "random" or "vgg19"')
