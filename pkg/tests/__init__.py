# テストパッケージ定義