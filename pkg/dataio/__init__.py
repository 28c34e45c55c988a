from .sources import Dataset, Normalizer, DataSource, IdxSource, SyntheticSource, load_idx, synth_dataset

__all__ = ['Dataset', 'Normalizer', 'DataSource', 'IdxSource', 'SyntheticSource', 'load_idx', 'synth_dataset']
