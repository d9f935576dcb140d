"""
ParamStore のアーカイブ保存（npz + JSONマニフェスト）
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from src.tensorcore.optim import ParamStore
from src.utils.common import CheckpointError, ensure_data_directory

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def _manifest_path(path: Path) -> Path:
    return path.with_suffix('.json')


def save_store(path, store: ParamStore, extra: Optional[Dict[str, Any]] = None) -> None:
    """パラメータ・Adamモーメント・EMAをまとめて保存"""
    path = Path(path).with_suffix('.npz')
    ensure_data_directory(str(path))
    arrays = {}
    for key, value in store.params.items():
        arrays[f"param/{key}"] = value
        arrays[f"adam_m/{key}"] = store.adam_m[key]
        arrays[f"adam_v/{key}"] = store.adam_v[key]
        if store.ema is not None:
            arrays[f"ema/{key}"] = store.ema[key]
    np.savez(path, **arrays)

    manifest = {
        'version': MANIFEST_VERSION,
        'name': store.name,
        'step': store.step,
        'has_ema': store.ema is not None,
        'dtype': str(next(iter(store.params.values())).dtype) if store.params else 'float32',
        'params': {key: list(value.shape) for key, value in store.params.items()},
        'extra': extra or {},
    }
    with open(_manifest_path(path), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.debug("saved %s (%d tensors) to %s", store.name, len(store.params), path)


def load_store(path) -> ParamStore:
    """save_store で保存したアーカイブを読み込む"""
    path = Path(path).with_suffix('.npz')
    manifest_path = _manifest_path(path)
    if not path.exists() or not manifest_path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    if manifest.get('version') != MANIFEST_VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")

    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}

    names = list(manifest['params'])
    try:
        params = {key: arrays[f"param/{key}"] for key in names}
        store = ParamStore(params, name=manifest['name'], with_ema=manifest['has_ema'],
                           dtype=np.dtype(manifest['dtype']))
        for key in names:
            if list(params[key].shape) != manifest['params'][key]:
                raise CheckpointError(f"{path}: shape mismatch for '{key}'")
            store.adam_m[key] = arrays[f"adam_m/{key}"]
            store.adam_v[key] = arrays[f"adam_v/{key}"]
            if store.ema is not None:
                store.ema[key] = arrays[f"ema/{key}"]
    except KeyError as e:
        raise CheckpointError(f"{path}: missing tensor {e}") from e
    store.step = int(manifest['step'])
    return store


def load_manifest_extra(path) -> Dict[str, Any]:
    manifest_path = _manifest_path(Path(path).with_suffix('.npz'))
    if not manifest_path.exists():
        raise CheckpointError(f"manifest not found: {manifest_path}")
    with open(manifest_path, 'r', encoding='utf-8') as f:
        return json.load(f).get('extra', {})
