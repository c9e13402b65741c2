"""Optional real trainer adapter for the fine-tune harness.

The acceptance suite runs entirely on the scripted mock; this adapter is
for users with a GPU who want to fine-tune an actual seq2seq ASR model on
an assembled synthetic manifest. transformers/torch are imported lazily so
the package works without them installed.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from pathlib import Path

from .errors import ValidationError
from .finetune import FinetuneConfig, Trainer
from .synth import SynthManifestEntry


class WhisperTrainer(Trainer):
    """Fine-tune a Whisper-family checkpoint on extracted entity clips.

    Yields the per-step training loss so the harness's early stopping
    applies unchanged. Requires `pip install torch transformers soundfile`.
    """

    def __init__(self, clips_root: str | Path, output_dir: str | Path, max_steps: int = 2000) -> None:
        self.clips_root = Path(clips_root)
        self.output_dir = Path(output_dir)
        self.max_steps = max_steps
        self._model = None
        self._processor = None

    def _load(self, base_model_id: str):
        try:
            import torch  # noqa: F401
            from transformers import WhisperForConditionalGeneration, WhisperProcessor
        except ImportError as exc:
            raise ValidationError(
                "WhisperTrainer needs the optional GPU stack: pip install torch transformers soundfile"
            ) from exc
        self._processor = WhisperProcessor.from_pretrained(base_model_id)
        self._model = WhisperForConditionalGeneration.from_pretrained(base_model_id)
        return self._model, self._processor

    def _batches(self, entries: Sequence[SynthManifestEntry], batch_size: int, seed: int):
        import random

        import soundfile as sf

        order = list(entries)
        random.Random(seed).shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            audio = [sf.read(self.clips_root / e.clip_audio_ref)[0] for e in chunk]
            targets = [e.target_text for e in chunk]
            yield audio, targets

    def train(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> Iterator[tuple[int, float]]:
        import torch

        model, processor = self._load(config.base_model_id)
        device = "cuda" if torch.cuda.is_available() else "cpu"
        model.to(device)
        model.train()
        optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
        torch.manual_seed(config.seed)
        step = 0
        while step < self.max_steps:
            for audio, targets in self._batches(entries, config.batch_size, config.seed + step):
                features = processor(
                    audio, sampling_rate=16_000, return_tensors="pt", padding=True
                ).input_features.to(device)
                labels = processor.tokenizer(
                    targets, return_tensors="pt", padding=True
                ).input_ids.to(device)
                outputs = model(input_features=features, labels=labels)
                outputs.loss.backward()
                optimizer.step()
                optimizer.zero_grad()
                step += 1
                yield step, float(outputs.loss.detach().cpu())
                if step >= self.max_steps:
                    break

    def artifact(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> dict:
        if self._model is None or self._processor is None:
            raise ValidationError("artifact requested before training ran")
        target = self.output_dir / f"{config.base_model_id.replace('/', '__')}-finetuned"
        target.mkdir(parents=True, exist_ok=True)
        self._model.save_pretrained(target)
        self._processor.save_pretrained(target)
        return {
            "artifact_id": target.name,
            "base_model_id": config.base_model_id,
            "path": str(target),
            "trained_samples": len(entries),
        }
