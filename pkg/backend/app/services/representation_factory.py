from app.exceptions import ConfigurationError
from app.schemas import FeatureKind
from app.services.speed_service import SpeedFeatureSpec


class RepresentationFactory:
    """Default speed-feature windows for each mel representation."""

    def __init__(self):
        self._spec_map = {
            "MS": {"time_window": 91, "band_low": 3, "band_high": 31},
            "LMS": {"time_window": 91, "band_low": 2, "band_high": 20},
            "MFCC": {"time_window": 61, "band_low": 1, "band_high": 31},
        }
        self._instances = {}

    @property
    def kinds(self) -> list[FeatureKind]:
        return list(self._spec_map)

    def get_spec(self, representation: str) -> SpeedFeatureSpec:
        if representation in self._instances:
            return self._instances[representation]

        window = self._spec_map.get(representation)
        if not window:
            raise ConfigurationError(f"Unknown representation: {representation}")

        instance = SpeedFeatureSpec(representation=representation, **window)
        self._instances[representation] = instance
        return instance

    def default_specs(self) -> dict[str, SpeedFeatureSpec]:
        return {kind: self.get_spec(kind) for kind in self.kinds}
