"""
錯誤類型模組 - 所有自訂例外皆繼承 ValueError
"""


class ChangeDetectionError(ValueError):
    """套件內所有錯誤的基底類別"""


class ConfigError(ChangeDetectionError):
    """設定值不合法（維度、步距、超參數範圍等）"""


class DataError(ChangeDetectionError):
    """資料檔案缺失、尺寸不符或標籤超出範圍"""


class ShapeError(ChangeDetectionError):
    """張量形狀不相容"""


class CheckpointError(ChangeDetectionError):
    """檢查點版本或參數形狀不符"""


class TrainingError(ChangeDetectionError):
    """訓練過程中出現非有限值等無法繼續的狀況"""
