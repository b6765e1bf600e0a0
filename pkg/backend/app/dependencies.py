from functools import lru_cache

from app.services.experiment_service import ExperimentConfig
from app.services.feature_service import FeatureService
from app.services.representation_factory import RepresentationFactory


@lru_cache
def get_representation_factory() -> RepresentationFactory:
    return RepresentationFactory()


@lru_cache
def get_default_config() -> ExperimentConfig:
    return ExperimentConfig(speed_specs=get_representation_factory().default_specs())


@lru_cache
def get_feature_service() -> FeatureService:
    return FeatureService(config=get_default_config().features)
