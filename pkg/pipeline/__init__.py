"""
Обучение, оценка, генерация описаний и командная строка
"""
