"""
LGNet: энкодер-декодер на residual U-блоках с языковым вниманием
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import get_settings
from utils.exceptions import ConfigError, ModelStageError, ShapeError

logger = logging.getLogger(__name__)

NUM_ENCODERS = 5
NUM_DECODERS = 6


class LGNetConfig(BaseModel):
    """Конфигурация сети"""

    model_config = ConfigDict(extra='forbid', protected_namespaces=())

    in_channels: int = Field(1, ge=1)
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256])
    ublock_heights: List[int] = Field(default_factory=lambda: [7, 6, 5, 4, 4])
    mid_channels: Optional[List[int]] = None
    descriptor_dim: int = Field(512, ge=1)
    input_size: Tuple[int, int] = (512, 512)
    seed: int = 0
    # Без языкового слияния E5 и D6 складываются напрямую,
    # без блоков слияния вход декодера - сумма скипа и апсемпла
    use_language_fusion: bool = True
    use_fusion_block: bool = True

    @field_validator('stage_channels', 'ublock_heights')
    @classmethod
    def _five_stages(cls, value: List[int]) -> List[int]:
        if len(value) != NUM_ENCODERS:
            raise ValueError(f"ожидается {NUM_ENCODERS} значений, получено {len(value)}")
        if any(v < 1 for v in value):
            raise ValueError("все значения должны быть положительными")
        return value

    @model_validator(mode='after')
    def _check_mid_channels(self) -> 'LGNetConfig':
        if self.mid_channels is not None:
            if len(self.mid_channels) != NUM_ENCODERS or any(v < 1 for v in self.mid_channels):
                raise ValueError("mid_channels: нужно 5 положительных значений")
        return self

    def stage_mid_channels(self) -> List[int]:
        if self.mid_channels is not None:
            return list(self.mid_channels)
        return [max(c // 2, 1) for c in self.stage_channels]


def _upsample_like(src: torch.Tensor, tar: torch.Tensor) -> torch.Tensor:
    if src.shape[-2:] == tar.shape[-2:]:
        return src
    return F.interpolate(src, size=tar.shape[-2:], mode='bilinear', align_corners=False)


def _upsample_to(src: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(src.shape[-2:]) == tuple(size):
        return src
    return F.interpolate(src, size=tuple(size), mode='bilinear', align_corners=False)


class _BatchStatsGuard:
    """При обучении на батче из одного вектора нормализует по накопленной статистике"""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] * x[0, 0].numel() <= 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=False, momentum=0.0, eps=self.eps)
        return super().forward(x)


class BatchNorm2d(_BatchStatsGuard, nn.BatchNorm2d):
    pass


class ConvNormAct(nn.Module):
    """Свертка 3x3, батч-нормализация, ReLU"""

    def __init__(self, in_ch: int, out_ch: int, dirate: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=dirate, dilation=dirate)
        self.bn = BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.bn(self.conv(x)))


class ResidualUBlock(nn.Module):
    """
    Residual U-блок высоты height: выход = U(x) + L(x),
    где L - локальное преобразование, U - внутренний U-путь
    с height - 2 понижениями разрешения и конкатенациями
    """

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, height: int, name: str = "rsu"):
        super().__init__()
        if height < 1:
            raise ConfigError(f"{name}: высота U-блока должна быть >= 1")
        self.height = height
        self.name = name

        self.local = ConvNormAct(in_ch, out_ch)

        n_enc = height - 1
        self.encoders = nn.ModuleList(
            ConvNormAct(out_ch if i == 0 else mid_ch, mid_ch) for i in range(n_enc)
        )
        bottom_ch = mid_ch if n_enc else out_ch
        self.bottom = ConvNormAct(bottom_ch, bottom_ch, dirate=2)
        self.decoders = nn.ModuleList(
            ConvNormAct(mid_ch * 2, out_ch if i == 0 else mid_ch) for i in range(n_enc)
        )
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    @property
    def min_side(self) -> int:
        return 2 ** (self.height - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.min_side:
            raise ModelStageError(
                self.name,
                f"spatial dims {tuple(x.shape[-2:])} too small for height {self.height} "
                f"(нужно >= {self.min_side})"
            )

        hxin = self.local(x)

        skips = []
        hx = hxin
        for i, conv in enumerate(self.encoders):
            if i > 0:
                hx = self.pool(hx)
            hx = conv(hx)
            skips.append(hx)

        hx = self.bottom(hx)

        for i in reversed(range(len(self.decoders))):
            hx = self.decoders[i](torch.cat((hx, skips[i]), dim=1))
            if i > 0:
                hx = _upsample_like(hx, skips[i - 1])

        return hx + hxin


def residual_ublock_forward(x: torch.Tensor, height: int, mid_channels: int, out_channels: int,
                            block: Optional[ResidualUBlock] = None) -> torch.Tensor:
    """Прямой проход U-блока по тензору [C, H, W] или [B, C, H, W]"""
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    if block is None:
        block = ResidualUBlock(x.shape[1], mid_channels, out_channels, height)
    out = block(x)
    return out if batched else out.squeeze(0)


def gap(x: torch.Tensor) -> torch.Tensor:
    """Глобальное усреднение по пространству: [..., C, H, W] -> [..., C]"""
    return x.mean(dim=(-2, -1))


class TargetMLP(nn.Module):
    """F_tar: проекция дескриптора цели в вектор длины числа каналов стадии"""

    def __init__(self, descriptor_dim: int, out_len: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or max(out_len, 32)
        self.net = nn.Sequential(
            nn.Linear(descriptor_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, out_len),
        )

    @property
    def last(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, td: torch.Tensor) -> torch.Tensor:
        return self.net(td)


def target_mlp(td: torch.Tensor, out_len: int, mlp: Optional[TargetMLP] = None) -> torch.Tensor:
    mlp = mlp or TargetMLP(td.shape[-1], out_len)
    return mlp(td)


def interleave(v1: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
    """
    Поочередное объединение: out[2k] = v1[k], out[2k+1] = v2[k]
    (по последней оси)
    """
    if v1.shape != v2.shape:
        raise ShapeError(f"length mismatch: v1 {tuple(v1.shape)}, v2 {tuple(v2.shape)}")
    return torch.stack((v1, v2), dim=-1).flatten(start_dim=-2)


class LanguageAttention(nn.Module):
    """
    Языковое внимание: sigmoid(BN(GroupConv(interleave(v1, v2), groups=2))).
    Вектор длины 2C трактуется как 2C-канальный тензор 1x1.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"language attention: число каналов {channels} должно быть четным (groups=2)")
        self.channels = channels
        self.conv = nn.Conv2d(2 * channels, channels, kernel_size=1, groups=2)
        self.bn = BatchNorm2d(channels)

    def forward(self, v1: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
        if v1.shape[-1] != self.channels or v2.shape[-1] != self.channels:
            raise ShapeError(
                f"length mismatch: v1 {v1.shape[-1]}, v2 {v2.shape[-1]}, ожидается {self.channels}"
            )
        stacked = interleave(v1, v2)
        logits = self.bn(self.conv(stacked[..., None, None]))
        return torch.sigmoid(logits)[..., 0, 0]


def language_attention(v1: torch.Tensor, v2: torch.Tensor,
                       block: Optional[LanguageAttention] = None) -> torch.Tensor:
    batched = v1.dim() == 2
    if not batched:
        v1, v2 = v1.unsqueeze(0), v2.unsqueeze(0)
    block = block or LanguageAttention(v1.shape[-1])
    weights = block(v1, v2)
    return weights if batched else weights.squeeze(0)


class LanguageFusionBlock(nn.Module):
    """Поканальное языковое гейтирование карты признаков"""

    def __init__(self, channels: int, descriptor_dim: int):
        super().__init__()
        self.mlp = TargetMLP(descriptor_dim, channels)
        self.attention = LanguageAttention(channels)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, feat: torch.Tensor, td: torch.Tensor) -> torch.Tensor:
        v1 = gap(feat)
        v2 = self.mlp(td)
        weights = self.attention(v1, v2)
        self.last_weights = weights.detach()
        return feat * weights[..., None, None]


def language_fusion(feat: torch.Tensor, td: torch.Tensor,
                    block: Optional[LanguageFusionBlock] = None) -> torch.Tensor:
    block = block or LanguageFusionBlock(feat.shape[-3], td.shape[-1])
    return block(feat, td)


class ChannelGate(nn.Module):
    """GAP -> depth-wise свертка -> BN -> sigmoid"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1, groups=channels)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1), keepdim=True)
        return torch.sigmoid(self.bn(self.conv(pooled)))


class FusionBlock(nn.Module):
    """Сумма признаков энкодера и декодера, взвешенных собственными гейтами"""

    def __init__(self, channels: int):
        super().__init__()
        self.enc_gate = ChannelGate(channels)
        self.dec_gate = ChannelGate(channels)
        self.last_weights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None

    def forward(self, enc_feat: torch.Tensor, dec_feat: torch.Tensor) -> torch.Tensor:
        if enc_feat.shape != dec_feat.shape:
            raise ShapeError(
                f"shape mismatch: encoder {tuple(enc_feat.shape)}, decoder {tuple(dec_feat.shape)}"
            )
        gate_e = self.enc_gate(enc_feat)
        gate_d = self.dec_gate(dec_feat)
        self.last_weights = (gate_e.detach(), gate_d.detach())
        return gate_e * enc_feat + gate_d * dec_feat


def fusion_block(enc_feat: torch.Tensor, dec_feat: torch.Tensor,
                 block: Optional[FusionBlock] = None) -> torch.Tensor:
    block = block or FusionBlock(enc_feat.shape[-3])
    return block(enc_feat, dec_feat)


class OutputBlock(nn.Module):
    """
    Выходной блок: проекции D1..D6 в 1 канал, масштабирующие веса
    из мелких выходов (D1..D3) применяются к глубоким (D4..D6),
    финальная точечная свертка по конкатенации всех шести
    """

    def __init__(self, decoder_channels: Sequence[int]):
        super().__init__()
        if len(decoder_channels) != NUM_DECODERS:
            raise ConfigError(f"output block: ожидается {NUM_DECODERS} декодеров")
        self.side = nn.ModuleList(nn.Conv2d(c, 1, kernel_size=1) for c in decoder_channels)
        self.scale = nn.Conv2d(3, 1, kernel_size=1)
        self.fuse = nn.Conv2d(NUM_DECODERS, 1, kernel_size=1)
        self.last_scale: Optional[torch.Tensor] = None

    def forward(self, decoder_maps: Sequence[torch.Tensor],
                size: Sequence[int]) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """
        Args:
            decoder_maps: Карты D1..D6 в собственных разрешениях
            size: Итоговое разрешение (H, W)

        Returns:
            Логиты финальной карты [B, 1, H, W] и логиты шести боковых выходов
        """
        sides = [_upsample_to(conv(feat), size) for conv, feat in zip(self.side, decoder_maps)]
        for i, side in enumerate(sides):
            if tuple(side.shape[-2:]) != tuple(size):
                raise ShapeError(f"resolution inconsistency: D{i + 1} {tuple(side.shape[-2:])}")

        shallow, deep = sides[:3], sides[3:]
        scale = torch.sigmoid(self.scale(torch.cat(shallow, dim=1)))
        self.last_scale = scale.detach()
        scaled_deep = [scale * d for d in deep]

        final = self.fuse(torch.cat(shallow + scaled_deep, dim=1))
        return final, sides


def output_block(shallow: Sequence[torch.Tensor], deep: Sequence[torch.Tensor],
                 size: Sequence[int], block: Optional[OutputBlock] = None) -> torch.Tensor:
    maps = list(shallow) + list(deep)
    block = block or OutputBlock([m.shape[1] for m in maps])
    final, _ = block(maps, size)
    return final


@dataclass
class ForwardOutputs:
    """Финальная карта вероятностей и шесть боковых выходов D1..D6 (все [B, 1, H, W])"""

    final: torch.Tensor
    side_outputs: List[torch.Tensor] = field(default_factory=list)

    def all_maps(self) -> List[torch.Tensor]:
        return list(self.side_outputs) + [self.final]


class LGNet(nn.Module):
    """
    E1..E5 (понижение x2 между стадиями) -> D6 (бутылочное горлышко) -> D5..D1.
    Языковое слияние на выходах E5 и D6, блоки слияния перед D5..D1.
    """

    def __init__(self, config: Optional[LGNetConfig] = None):
        super().__init__()
        self.config = config or LGNetConfig()
        cfg = self.config
        ch = cfg.stage_channels
        mid = cfg.stage_mid_channels()
        heights = cfg.ublock_heights

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)

            self.encoders = nn.ModuleList()
            in_ch = cfg.in_channels
            for i in range(NUM_ENCODERS):
                self.encoders.append(ResidualUBlock(in_ch, mid[i], ch[i], heights[i], name=f"E{i + 1}"))
                in_ch = ch[i]
            self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

            self.bottleneck = ResidualUBlock(ch[4], mid[4], ch[4], heights[4], name="D6")
            self.language_enc: Optional[LanguageFusionBlock] = None
            self.language_dec: Optional[LanguageFusionBlock] = None
            if cfg.use_language_fusion:
                self.language_enc = LanguageFusionBlock(ch[4], cfg.descriptor_dim)
                self.language_dec = LanguageFusionBlock(ch[4], cfg.descriptor_dim)

            # decoders[i] - D(i+1); D1 выдает ch[0], D(i+1) при i >= 1 выдает ch[i-1]
            self.fusions: Optional[nn.ModuleList] = None
            if cfg.use_fusion_block:
                self.fusions = nn.ModuleList(FusionBlock(ch[i]) for i in range(NUM_ENCODERS))
            self.decoders = nn.ModuleList(
                ResidualUBlock(ch[i], mid[i], ch[max(i - 1, 0)], heights[i], name=f"D{i + 1}")
                for i in range(NUM_ENCODERS)
            )

            decoder_channels = [ch[max(i - 1, 0)] for i in range(NUM_ENCODERS)] + [ch[4]]
            self.output = OutputBlock(decoder_channels)

    def _check(self, stage: str, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ModelStageError(stage, "non-finite activation")
        return x

    def attention_weights(self) -> List[torch.Tensor]:
        """Все веса внимания и масштабирования последнего прохода"""
        weights = []
        if self.language_enc is not None:
            weights += [self.language_enc.last_weights, self.language_dec.last_weights]
        for fusion in self.fusions or []:
            if fusion.last_weights is not None:
                weights.extend(fusion.last_weights)
        weights.append(self.output.last_scale)
        return [w for w in weights if w is not None]

    def forward(self, image: torch.Tensor, td: torch.Tensor) -> ForwardOutputs:
        """
        Args:
            image: [B, in_channels, H, W]
            td: Дескриптор цели [B, descriptor_dim]

        Returns:
            ForwardOutputs с вероятностями
        """
        if td.dim() == 1:
            td = td.unsqueeze(0)
        if td.shape[-1] != self.config.descriptor_dim:
            raise ConfigError(
                f"descriptor dim {td.shape[-1]} != config descriptor_dim {self.config.descriptor_dim}"
            )
        if image.shape[1] != self.config.in_channels:
            raise ConfigError(f"image channels {image.shape[1]} != in_channels {self.config.in_channels}")

        size = image.shape[-2:]

        enc_out = []
        hx = image
        for i, encoder in enumerate(self.encoders):
            if i > 0:
                hx = self.pool(hx)
            hx = self._check(f"E{i + 1}", encoder(hx))
            enc_out.append(hx)

        d6 = self._check("D6", self.bottleneck(enc_out[4]))
        if self.language_enc is not None:
            fused = self.language_enc(enc_out[4], td) + self.language_dec(d6, td)
        else:
            fused = enc_out[4] + d6
        fused = self._check("language fusion", fused)

        dec_out = [None] * NUM_DECODERS
        dec_out[5] = d6
        prev = fused
        for i in reversed(range(NUM_ENCODERS)):
            up = _upsample_like(prev, enc_out[i])
            dec_in = self.fusions[i](enc_out[i], up) if self.fusions is not None else enc_out[i] + up
            prev = self._check(f"D{i + 1}", self.decoders[i](dec_in))
            dec_out[i] = prev

        final_logits, side_logits = self.output(dec_out, size)
        self._check("output", final_logits)

        return ForwardOutputs(
            final=torch.sigmoid(final_logits),
            side_outputs=[torch.sigmoid(s) for s in side_logits],
        )


def lgnet_forward(model: LGNet, image, td) -> ForwardOutputs:
    """
    Прямой проход для одного образца: IRImage/TargetDescriptor -> карты [H, W]

    Args:
        model: Сеть
        image: IRImage
        td: TargetDescriptor

    Returns:
        ForwardOutputs с картами [H, W] во входном разрешении сети
    """
    if td.dim != model.config.descriptor_dim:
        raise ConfigError(f"descriptor dim {td.dim} != config descriptor_dim {model.config.descriptor_dim}")

    param = next(model.parameters())
    pixels = torch.as_tensor(image.pixels, dtype=param.dtype, device=param.device)[None, None]
    pixels = resize_image(pixels, model.config.input_size)
    td_tensor = torch.as_tensor(td.vector, dtype=param.dtype, device=param.device)[None]

    outputs = model(pixels, td_tensor)
    return ForwardOutputs(
        final=outputs.final[0, 0],
        side_outputs=[s[0, 0] for s in outputs.side_outputs],
    )


def resize_image(pixels: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Билинейное приведение изображения [B, C, H, W] к размеру входа сети"""
    return _upsample_to(pixels, size)


def resize_mask(mask: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Приведение маски [B, 1, H, W] к размеру ближайшим соседом"""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=tuple(size), mode='nearest')


def deep_supervision_loss(outputs: ForwardOutputs, gt: torch.Tensor, eps: Optional[float] = None) -> torch.Tensor:
    """
    Сумма BCE по шести боковым выходам и финальной карте, веса равны,
    каждая BCE усреднена по пикселям

    Args:
        outputs: Выходы сети
        gt: Маска той же формы, что и карты
        eps: Ограничение вероятностей

    Returns:
        Скаляр
    """
    eps = eps if eps is not None else get_settings().BCE_EPSILON
    gt = gt.to(outputs.final.dtype)
    total = outputs.final.new_zeros(())
    for prob in outputs.all_maps():
        if prob.shape != gt.shape:
            raise ShapeError(f"shape mismatch: output {tuple(prob.shape)}, gt {tuple(gt.shape)}")
        total = total + F.binary_cross_entropy(prob.clamp(eps, 1.0 - eps), gt)
    return total


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    """Число параметров модели"""
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def describe_model(model: LGNet) -> str:
    params = count_parameters(model)
    return f"LGNet: {params / 1e6:.2f}M параметров, вход {tuple(model.config.input_size)}"

