from .attributes import AttributeBundle, extract_attributes, orientation_tag
from .dataset import (DatasetConfig, DatasetConfigError, ExpressionRecord, build_dataset,
                      catrand_select, depth_subset, difficulty_subset, generate_split, load_split,
                      subset_labels)
from .expressions import Vocabulary, compose_expression, render_expression, tokenize
from .scene import (CATEGORIES, CATEGORY_INDEX, MEAN_DIMS, GenerationError, ObjectRecord,
                    SceneConfig, SceneRecord, generate_scene, render_scene)
