"""
docprep: 非叙事文档（财报、保单、FAQ）的 OCR 后处理与检索评测流水线

OCR 文本 -> MLLM 后处理（校正 / 版面重建 / 检索导向改写）-> 切块 -> BM25 / 向量 / 混合检索 -> MRR、P@1
"""

__version__ = "0.1.0"
