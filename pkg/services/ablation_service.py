from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from config import RunConfig, first_error
from errors import ConfigError, NonFiniteLossError
from evalkit import format_table, write_csv
from logger import logger
from models import AblationConfiguration, AblationRow
from services.evaluation_service import EvaluationService
from services.training_service import TrainingService
from synthdata import SceneDataset

GRID_ROWS = ("baseline", "mixup_cls", "mixup_cls_ent", "mixup_cls_con", "full")
SWEEP_PARAMETERS = ("alpha", "lambda_ent", "lambda_con")


def loss_grid(config: RunConfig, names: Optional[Sequence[str]] = None) -> List[AblationConfiguration]:
    """
    The loss-combination grid. Regularizer weights come from `config`;
    the baseline disables mixing and both regularizers.
    """
    ent, con = config.lambda_ent, config.lambda_con
    grid = {
        "baseline": AblationConfiguration(name="baseline", mixup=False),
        "mixup_cls": AblationConfiguration(name="mixup_cls"),
        "mixup_cls_ent": AblationConfiguration(name="mixup_cls_ent", lambda_ent=ent),
        "mixup_cls_con": AblationConfiguration(name="mixup_cls_con", lambda_con=con),
        "full": AblationConfiguration(name="full", lambda_ent=ent, lambda_con=con),
    }
    selected = list(names) if names else list(GRID_ROWS)
    unknown = [n for n in selected if n not in grid]
    if unknown:
        raise ConfigError(f"unknown ablation rows: {', '.join(unknown)} (known: {', '.join(GRID_ROWS)})")
    return [grid[n] for n in selected]


def sweep_configurations(config: RunConfig, parameter: str, values: Sequence[float]) -> List[AblationConfiguration]:
    """Full objective with one of alpha / lambda_ent / lambda_con varied."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep '{parameter}' (choose from {', '.join(SWEEP_PARAMETERS)})")
    rows = []
    for value in values:
        settings = {"alpha": None, "lambda_ent": config.lambda_ent, "lambda_con": config.lambda_con}
        settings[parameter] = float(value)
        try:
            rows.append(AblationConfiguration(name=f"{parameter}={value:g}", **settings))
        except ValidationError as e:
            raise ConfigError(f"sweep {parameter}={value:g}: {first_error(e)}")
    return rows


def _mean_std(values: List[float]):
    if not values:
        return None, None
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), std


class AblationService:
    """
    Trains and scores every configuration with identical seeds and schedule.

    A configuration whose training diverges is reported as failed and the
    remaining configurations still run.
    """

    def __init__(self, config: RunConfig, dataset: SceneDataset, out_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir or config.out_dir)

    def _run_once(self, configuration: AblationConfiguration, seed: int) -> Dict[str, float]:
        overrides = {
            "seed": seed,
            "mixup": configuration.mixup,
            "lambda_ent": configuration.lambda_ent,
            "lambda_con": configuration.lambda_con,
            "out_dir": str(self.out_dir / configuration.name / f"seed_{seed}"),
        }
        if configuration.alpha is not None:
            overrides["alpha"] = configuration.alpha
        run_config = self.config.with_overrides(**overrides)

        trainer = TrainingService(run_config, self.dataset.train.training_view())
        trainer.train()
        evaluator = EvaluationService(trainer.net, run_config.pseudo_label_config(), workers=run_config.workers)
        report = evaluator.evaluate(self.dataset.val)
        return {"miou": report.iou.miou, "coverage": report.coverage, "uniformity": report.uniformity}

    def run_configuration(self, configuration: AblationConfiguration, seeds: Sequence[int]) -> AblationRow:
        logger.info(f"🧪 Ablation '{configuration.name}' over {len(seeds)} seed(s)")
        results = []
        try:
            for seed in seeds:
                results.append(self._run_once(configuration, seed))
        except NonFiniteLossError as e:
            logger.error(f"❌ Ablation '{configuration.name}' failed: {e}")
            return AblationRow(name=configuration.name, status="failed", seeds=len(seeds), error=str(e))

        row = {"name": configuration.name, "seeds": len(seeds)}
        for metric in ("miou", "coverage", "uniformity"):
            mean, std = _mean_std([r[metric] for r in results])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_std"] = std
        logger.info(f"✅ Ablation '{configuration.name}': mIoU {row['miou_mean']:.4f} ± {row['miou_std']:.4f}")
        return AblationRow(**row)

    def run_ablation(
        self, configurations: Sequence[AblationConfiguration], seeds: Sequence[int], table_name: str = "ablation"
    ) -> List[AblationRow]:
        """Run every configuration, then write `<table_name>.csv` and `.txt`."""
        if not seeds:
            raise ConfigError("ablation needs at least one seed")
        rows = [self.run_configuration(c, seeds) for c in configurations]
        write_csv(rows, self.out_dir / f"{table_name}.csv")
        (self.out_dir / f"{table_name}.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
        return rows
