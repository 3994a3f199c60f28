# 模組分組用空目錄
