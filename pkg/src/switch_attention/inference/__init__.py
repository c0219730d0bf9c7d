from .cost_accounting import CostReport, count_prefill_flops, decode_mem_access_summary
from .kv_cache import LayerKVCache
from .session import InferenceSession, generate
