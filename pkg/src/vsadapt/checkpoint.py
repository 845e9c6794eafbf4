"""
Model archives: state dicts of named modules plus a JSON manifest that records how to rebuild them.
"""
import json
import logging
import os
import traceback
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import torch
from torch import nn

from vsadapt.errors import CheckpointError

logger = logging.getLogger("vsadapt.checkpoint")

FORMAT_VERSION = 1


def save_checkpoint(path: Union[str, os.PathLike], modules: Mapping[str, nn.Module],
                    manifest: Mapping[str, Any]) -> Path:
    """
    Write one archive holding the state dicts of `modules` (keyed by name) and a JSON manifest.
    The archive is written to a temporary file and renamed, so readers never see a partial file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        'format_version': FORMAT_VERSION,
        'manifest': json.dumps(dict(manifest), sort_keys=True),
        'tensors': {name: {k: v.detach().cpu() for k, v in module.state_dict().items()}
                    for name, module in modules.items()},
    }
    tmp = path.with_name(path.name + '.tmp')
    torch.save(archive, tmp)
    os.replace(tmp, path)
    logger.debug(f'save_checkpoint({path}): modules={sorted(modules)}')
    return path


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[Dict[str, Dict[str, torch.Tensor]], Dict[str, Any]]:
    """
    :return: (tensors by module name, manifest)
    """
    path = Path(path)
    logger.info(f'load_checkpoint({path})')
    if not path.exists():
        raise CheckpointError(f'no checkpoint at {path}')
    try:
        archive = torch.load(path, map_location='cpu', weights_only=True)
        manifest = json.loads(archive['manifest'])
        tensors = archive['tensors']
    except Exception as e:
        logger.error(f'Could not read checkpoint {path}: ' + traceback.format_exc())
        raise CheckpointError(f'unreadable checkpoint {path}: {e}') from e
    if archive.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'{path} has format version {archive.get("format_version")}, expected {FORMAT_VERSION}')
    return tensors, manifest


def restore(module: nn.Module, tensors: Mapping[str, Mapping[str, torch.Tensor]], name: str) -> nn.Module:
    if name not in tensors:
        raise CheckpointError(f'checkpoint has no tensors for {name!r}; found {sorted(tensors)}')
    try:
        module.load_state_dict(tensors[name])
    except RuntimeError as e:
        raise CheckpointError(f'checkpoint tensors for {name!r} do not fit the model: {e}') from e
    return module
