"""
文字嵌入提供者模組 - 為每個類別名稱產生 class-level 文字嵌入 T_class

預設使用 seeded 偽嵌入讓整個專案可重現；真實文字編碼器的輸出可以
預先匯出成檔案再匯入，或直接透過 SentenceTransformer 計算。
"""

import hashlib
import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_TEMPLATE = "a photo of {}"


class EmbeddingSource(Enum):
    FILE_IMPORT = "file_import"
    SEEDED_SYNTHETIC = "seeded_synthetic"
    SENTENCE_TRANSFORMER = "sentence_transformer"


@dataclass
class ClassEmbeddingSet:
    """
    每個類別一列的文字嵌入矩陣

    Attributes:
        embeddings: [K, D_t] float32 矩陣
        source: 嵌入來源
        class_names: K 個類別名稱（與列順序一致）
    """

    embeddings: np.ndarray
    source: EmbeddingSource
    class_names: List[str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise DataError(f"嵌入矩陣必須是 2 維，目前形狀為 {self.embeddings.shape}")
        if self.embeddings.shape[0] != len(self.class_names):
            raise DataError(
                f"嵌入列數 {self.embeddings.shape[0]} 與類別數 {len(self.class_names)} 不符"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise DataError("嵌入矩陣含有非有限值")

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_prompts(class_names: Sequence[str], template: str = DEFAULT_PROMPT_TEMPLATE) -> List[str]:
    """將類別名稱套入提示模板，底線視為空白"""
    return [template.format(name.replace("_", " ")) for name in class_names]


class SeededEmbeddingProvider:
    """
    以 (文字, seed) 的雜湊產生單位長度的偽嵌入
    """

    def __init__(self, dim: int = 512, seed: int = 0):
        """
        初始化 seeded 嵌入提供者

        Args:
            dim: 嵌入維度 D_t
            seed: 隨機種子
        """
        if dim < 1:
            raise ValueError("dim 必須是正整數")
        self.dim = dim
        self.seed = seed
        self.model_identifier = "seeded"

    def embed_texts(self, texts: List[str]) -> List[List[float]]:
        """
        將多個文字轉換為嵌入向量

        Args:
            texts: 要轉換的文字列表

        Returns:
            List[List[float]]: 嵌入向量列表，每列長度為 1
        """
        if not texts:
            return []

        embeddings = []
        for text in texts:
            digest = hashlib.sha256(f"{self.seed}:{self.dim}:{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vector = rng.standard_normal(self.dim)
            vector /= np.linalg.norm(vector)
            embeddings.append(vector.tolist())
        return embeddings


class SentenceTransformerEmbeddingProvider:
    """
    使用 SentenceTransformer 的本地模型來產生類別提示的嵌入
    """

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        """
        初始化 SentenceTransformer 嵌入提供者

        Args:
            model_name: 要使用的模型名稱
        """
        # 延遲載入，只有真的使用時才需要安裝模型
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name)
        self.model_identifier = model_name

    def embed_texts(self, texts: List[str]) -> List[List[float]]:
        if not texts:
            return []

        try:
            embeddings = self.model.encode(texts, convert_to_tensor=False)
            return [np.asarray(emb, dtype=np.float32).tolist() for emb in embeddings]
        except Exception as e:
            logger.error("產生嵌入時發生錯誤: %s", e)
            raise


def embed_class_names(
    provider,
    class_names: Sequence[str],
    source: EmbeddingSource,
    template: str = DEFAULT_PROMPT_TEMPLATE,
) -> ClassEmbeddingSet:
    """用任一提供者把類別名稱轉成 ClassEmbeddingSet"""
    vectors = provider.embed_texts(build_prompts(class_names, template))
    return ClassEmbeddingSet(np.asarray(vectors), source, list(class_names))


def load_embedding_file(path: str) -> ClassEmbeddingSet:
    """
    讀取預先計算的嵌入檔

    支援兩種格式：
      - .npz：`embeddings` [K, D_t] 與 `class_names` [K] 兩個陣列
      - 文字檔：第一行 `K D_t`，接著 K 行 `類別名稱<TAB>以空白分隔的 D_t 個數值`

    Args:
        path: 檔案路徑

    Returns:
        ClassEmbeddingSet: source 為 file_import
    """
    if not os.path.exists(path):
        raise DataError(f"找不到嵌入檔: {path}")

    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as archive:
            if "embeddings" not in archive or "class_names" not in archive:
                raise DataError(f"嵌入檔缺少 embeddings 或 class_names 陣列: {path}")
            matrix = archive["embeddings"]
            names = [str(name) for name in archive["class_names"]]
        return ClassEmbeddingSet(matrix, EmbeddingSource.FILE_IMPORT, names)

    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines:
        raise DataError(f"嵌入檔為空: {path}")
    try:
        rows, dim = (int(value) for value in lines[0].split())
    except ValueError:
        raise DataError(f"嵌入檔標頭必須是 'K D_t'，收到 {lines[0]!r}") from None
    body = lines[1:]
    if len(body) != rows:
        raise DataError(f"嵌入檔標頭宣告 {rows} 列，實際找到 {len(body)} 列: {path}")

    names, vectors = [], []
    for index, line in enumerate(body, start=2):
        if "\t" not in line:
            raise DataError(f"第 {index} 行缺少類別名稱與數值之間的 TAB")
        name, values = line.split("\t", 1)
        vector = [float(value) for value in values.split()]
        if len(vector) != dim:
            raise DataError(f"第 {index} 行維度為 {len(vector)}，標頭宣告為 {dim}")
        names.append(name)
        vectors.append(vector)
    return ClassEmbeddingSet(np.asarray(vectors), EmbeddingSource.FILE_IMPORT, names)


def export_embedding_file(embedding_set: ClassEmbeddingSet, path: str) -> None:
    """依副檔名寫出 .npz 或文字格式的嵌入檔"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if path.endswith(".npz"):
        np.savez(
            path,
            embeddings=embedding_set.embeddings,
            class_names=np.asarray(embedding_set.class_names),
        )
        return
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{embedding_set.num_classes} {embedding_set.dim}\n")
        for name, row in zip(embedding_set.class_names, embedding_set.embeddings):
            f.write(name + "\t" + " ".join(f"{value:.8g}" for value in row) + "\n")


def text_provider_load(
    path: Optional[str],
    class_names: Sequence[str],
    seed: int,
    d_t: int,
    template: str = DEFAULT_PROMPT_TEMPLATE,
) -> ClassEmbeddingSet:
    """
    取得類別文字嵌入：有檔案就匯入，否則以 seed 產生

    Args:
        path: 嵌入檔路徑或 None
        class_names: 類別名稱（順序即列順序）
        seed: seeded 嵌入的種子
        d_t: 期望的嵌入維度
        template: 提示模板

    Returns:
        ClassEmbeddingSet: 已驗證的嵌入
    """
    if path is None:
        provider = SeededEmbeddingProvider(dim=d_t, seed=seed)
        return embed_class_names(
            provider, class_names, EmbeddingSource.SEEDED_SYNTHETIC, template
        )

    embedding_set = load_embedding_file(path)
    expected = (len(class_names), d_t)
    found = embedding_set.embeddings.shape
    if tuple(found) != expected:
        raise DataError(
            f"嵌入檔形狀不符: 預期 {expected[0]} 列 x {expected[1]} 維，"
            f"找到 {found[0]} 列 x {found[1]} 維 ({path})"
        )
    if list(embedding_set.class_names) != list(class_names):
        mismatch = next(
            (a, b) for a, b in zip(embedding_set.class_names, class_names) if a != b
        )
        raise DataError(f"嵌入檔類別順序不符: 檔案為 {mismatch[0]!r}，設定為 {mismatch[1]!r}")
    logger.info("已匯入 %d 個類別嵌入: %s", embedding_set.num_classes, path)
    return embedding_set
