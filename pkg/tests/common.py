"""Small config builders shared across test modules."""
from matchkd.data import DatasetConfig
from matchkd.model import ModelConfig


def tiny_data(**overrides) -> DatasetConfig:
    base = dict(
        grid=(2, 2), patch_dim=4, num_symbols=5, prompt_ids=(7, 8),
        train_size=12, eval_size=4,
    )
    base.update(overrides)
    return DatasetConfig(**base)


def tiny_model(role="teacher", **overrides) -> ModelConfig:
    base = dict(
        role=role, vocab_size=12, hidden_dim=8, num_layers=1, num_heads=2,
        patch_grid=(2, 2), patch_dim=4, mlp_ratio=2, max_seq_len=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_run_doc() -> dict:
    """A full run-config document matching the tiny test configs above."""
    model = {"vocab_size": 12, "hidden_dim": 8, "num_layers": 1, "num_heads": 2,
             "patch_grid": [2, 2], "patch_dim": 4, "mlp_ratio": 2, "max_seq_len": 16}
    return {
        "model_teacher": dict(model),
        "model_student": dict(model, pool_grid=[1, 2]),
        "data": {"grid": [2, 2], "patch_dim": 4, "num_symbols": 5, "prompt_ids": [7, 8],
                 "train_size": 12, "eval_size": 4},
        "distill": {"steps": 6, "teacher_steps": 8, "batch_size": 4, "eval_interval": 4},
    }
