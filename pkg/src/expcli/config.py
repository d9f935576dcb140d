"""
実験設定（RunConfig）の読み込み・検証・ハッシュ
既定値は config/chunksearch_config.yaml、profiles で上書きセットを切り替える
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.utils.common import ConfigError, load_config

DEFAULT_CONFIG_FILE = 'config/chunksearch_config.yaml'

ABLATIONS = ('no-warm-start', 'no-hybrid-wm', 'no-expert-iteration')


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class TaskSettings(_Section):
    name: str = 'point_reach_obstacle'
    demos: int = Field(10, ge=1)
    demo_noise: float = Field(0.05, ge=0)
    process_noise_std: Optional[float] = Field(None, ge=0)
    demo_file: Optional[str] = None


class RunSettings(_Section):
    seed: int = Field(0, ge=0)
    seeds: List[int] = Field(default_factory=lambda: [0])
    checkpoint_every: int = Field(1, ge=1)


class WorldModelSettings(_Section):
    deter: int = Field(512, ge=1)
    groups: int = Field(32, ge=1)
    classes: int = Field(32, ge=2)
    units: int = Field(512, ge=1)
    encoder_layers: int = Field(5, ge=1)
    decoder_layers: int = Field(5, ge=1)
    lr: float = Field(1e-4, gt=0)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(100.0, gt=0)
    beta_pred: float = Field(1.0, ge=0)
    beta_dyn: float = Field(0.1, ge=0)
    beta_rep: float = Field(0.5, ge=0)
    free_nats: float = Field(1.0, ge=0)
    recon_scale: float = Field(1.0, gt=0)
    batch_size: int = Field(16, ge=2)
    batch_length: int = Field(32, ge=2)


class RewardModelSettings(_Section):
    units: int = Field(512, ge=1)
    hidden_layers: int = Field(2, ge=0)
    lr: float = Field(3e-5, gt=0)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(100.0, gt=0)
    gp_coef: float = Field(10.0, ge=0)


class CriticSettings(_Section):
    members: int = Field(5, ge=2)
    units: int = Field(512, ge=1)
    hidden_layers: int = Field(2, ge=0)
    c_unc: float = Field(1.0, ge=0)
    lr: float = Field(3e-5, gt=0)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(100.0, gt=0)
    slow_reg: float = Field(1.0, ge=0)
    ema_decay: float = Field(0.98, ge=0, le=1)
    gamma: float = Field(0.997, ge=0, le=1)
    lam: float = Field(0.95, ge=0, le=1)


class PolicySettings(_Section):
    chunk: int = Field(8, ge=1)
    units: int = Field(256, ge=1)
    hidden_layers: int = Field(3, ge=1)
    diffusion_steps: int = Field(16, ge=1)
    sample_steps: int = Field(4, ge=1)
    embed_dim: int = Field(16, ge=2)
    batch_size: int = Field(256, ge=1)
    lr_max: float = Field(1e-4, gt=0)
    lr_min: float = Field(1e-5, gt=0)
    warmup_steps: int = Field(100, ge=0)
    weight_decay: float = Field(1e-6, ge=0)
    clip_norm: float = Field(100.0, gt=0)
    pretrain_iterations: int = Field(24000, ge=1)
    distill_iterations: int = Field(1000, ge=1)
    blend_decay: float = Field(0.1, ge=0)

    @model_validator(mode='after')
    def _check(self):
        if self.sample_steps > self.diffusion_steps:
            raise ValueError('sample_steps must not exceed diffusion_steps')
        if self.lr_min > self.lr_max:
            raise ValueError('lr_min must not exceed lr_max')
        return self


class PlannerSettings(_Section):
    samples: int = Field(256, ge=1)
    iterations: int = Field(6, ge=0)
    top_k: int = Field(32, ge=1)
    temperature: float = Field(0.5, gt=0)
    sigma_init: float = Field(0.3, gt=0)
    sigma_min: float = Field(0.02, gt=0)
    mode: Literal['sample', 'mean'] = 'sample'
    antithetic: bool = True
    warm_start_mu: bool = False

    @model_validator(mode='after')
    def _check(self):
        if self.top_k > self.samples:
            raise ValueError('top_k must not exceed samples')
        return self


class ScheduleSettings(_Section):
    budget: int = Field(50000, ge=1)
    warm_start_fraction: float = Field(0.2, ge=0, lt=1)
    warm_start_multiplier: float = Field(1.5, ge=0)
    round_env_steps: int = Field(3500, ge=1)
    round_grad_steps: int = Field(5000, ge=1)
    rm_every: int = Field(100, ge=1)
    distill_every: int = Field(10, ge=1)
    relabel_trajectories: int = Field(64, ge=1)
    exploration_std: float = Field(0.1, ge=0)
    replay_capacity: int = Field(100000, ge=1)
    posthoc_distillation: bool = False


class EvaluationSettings(_Section):
    episodes: int = Field(50, ge=1)
    seed_offset: int = Field(100000, ge=0)
    every_rounds: int = Field(1, ge=1)
    planner_mode: Literal['sample', 'mean'] = 'mean'
    rm_traces: bool = False


class AblationSettings(_Section):
    hybrid_wm: bool = True
    expert_iteration: bool = True


class TTSSettings(_Section):
    samples: List[int] = Field(default_factory=lambda: [16, 64, 256, 1024, 2048])
    iterations: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 6, 9])


class BCSettings(_Section):
    demo_counts: List[int] = Field(default_factory=lambda: [5, 10, 25, 50])


class RunConfig(_Section):
    task: TaskSettings = TaskSettings()
    run: RunSettings = RunSettings()
    world_model: WorldModelSettings = WorldModelSettings()
    reward_model: RewardModelSettings = RewardModelSettings()
    critic: CriticSettings = CriticSettings()
    policy: PolicySettings = PolicySettings()
    planner: PlannerSettings = PlannerSettings()
    schedule: ScheduleSettings = ScheduleSettings()
    evaluation: EvaluationSettings = EvaluationSettings()
    ablation: AblationSettings = AblationSettings()
    tts: TTSSettings = TTSSettings()
    bc: BCSettings = BCSettings()

    @property
    def variant(self) -> str:
        return variant_name(self)


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(item: str) -> Dict[str, Any]:
    """'section.key=value' を入れ子の辞書に変換（値はYAMLスカラーとして解釈）"""
    if '=' not in item:
        raise ConfigError(f"override must look like section.key=value: '{item}'")
    path, raw = item.split('=', 1)
    keys = [k for k in path.strip().split('.') if k]
    if not keys:
        raise ConfigError(f"empty key in override '{item}'")
    value = yaml.safe_load(raw) if raw.strip() else None
    nested: Dict[str, Any] = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


def _validate(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        fields = ', '.join('.'.join(str(p) for p in err['loc']) + f" ({err['msg']})" for err in e.errors())
        raise ConfigError(f"invalid config: {fields}") from e


def load_run_config(config_file: Optional[str] = None, profile: Optional[str] = None,
                    overrides: Sequence[str] = (), defaults_file: str = DEFAULT_CONFIG_FILE) -> RunConfig:
    """既定値 < プロファイル < 設定ファイル < --set の順に上書きして検証"""
    try:
        defaults = load_config(defaults_file)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {defaults_file}") from e
    profiles = defaults.pop('profiles', {}) or {}
    data = defaults
    if profile:
        if profile not in profiles:
            raise ConfigError(f"unknown profile '{profile}' (available: {sorted(profiles)})")
        data = _deep_merge(data, profiles[profile])
    if config_file:
        try:
            user = load_config(config_file)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_file}") from e
        user.pop('profiles', None)
        data = _deep_merge(data, user)
    for item in overrides:
        data = _deep_merge(data, parse_override(item))
    return _validate(data)


def with_updates(config: RunConfig, *overrides: str) -> RunConfig:
    data = config.model_dump(mode='json')
    for item in overrides:
        data = _deep_merge(data, parse_override(item))
    return _validate(data)


def apply_ablation(config: RunConfig, ablation: Optional[str]) -> RunConfig:
    if not ablation:
        return config
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{ablation}' (choose from {', '.join(ABLATIONS)})")
    update = {
        'no-warm-start': 'schedule.warm_start_fraction=0',
        'no-hybrid-wm': 'ablation.hybrid_wm=false',
        'no-expert-iteration': 'ablation.expert_iteration=false',
    }[ablation]
    return with_updates(config, update)


def variant_name(config: RunConfig) -> str:
    parts = []
    if config.schedule.warm_start_fraction == 0:
        parts.append('no-warm-start')
    if not config.ablation.hybrid_wm:
        parts.append('no-hybrid-wm')
    if not config.ablation.expert_iteration:
        parts.append('no-expert-iteration')
    return '+'.join(parts) if parts else 'full'


def canonical_json(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))


def config_hash(config: RunConfig) -> str:
    """正規化JSONのSHA-256"""
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()


def run_id(config: RunConfig) -> str:
    return config_hash(config)[:16]


def dump_config(config: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.model_dump(mode='json'), f, allow_unicode=True, sort_keys=True)


def load_dumped_config(path) -> RunConfig:
    """dump_config で書いた設定を読み戻す（プロファイル等は適用済み）"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return _validate(yaml.safe_load(f) or {})
