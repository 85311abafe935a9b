# Mixed LRMoE パッケージ
