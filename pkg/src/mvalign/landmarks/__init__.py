"""Landmark schemas, union sets, datasets and the synthetic face generator."""
from .dataset import (DatasetError, Sample, SceneRecord, augment, load_dataset, load_scenes, read_frames,
                      sample_augmentation, sequence_samples, synthesize_dataset, write_dataset, write_scenes)
from .schema import (NATIVE_SCHEMA, VIEWS, SchemaError, UnionSchema, build_union_schema, five_point_template,
                     from_union, load_templates, nearest_assignment, to_union)
