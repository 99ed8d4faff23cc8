# テストパッケージの初期化