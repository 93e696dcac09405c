"""Trainable fraction and per-message payload sizes at desk scale and at the wide-model shape."""

from fedpatch import checkpoint
from fedpatch.federation import full_model_bytes
from fedpatch.model import WIDE_CONFIG, ForecastModel, closed_form_counts, desk_config, parameter_counts


def main() -> None:
    model = ForecastModel.init(desk_config(), 0).for_forecasting().to_peft(0)
    counts = parameter_counts(model)
    adapter = checkpoint.payload_size({k: model.params[k].shape for k in model.trainable})
    full = full_model_bytes(model)
    print(f"desk: {counts.trainable}/{counts.total} trainable ({100 * counts.fraction:.2f}%), "
          f"adapter payload {adapter} B, full payload {full} B, ratio {full / adapter:.2f}x")
    t, total = closed_form_counts(WIDE_CONFIG)
    print(f"wide: {t}/{total} trainable ({100 * t / total:.2f}%), ratio {total / t:.1f}x")


if __name__ == "__main__":
    main()
